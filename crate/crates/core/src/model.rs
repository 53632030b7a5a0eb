//! Probabilistic classifier, loss and training loop.

use std::time::Instant;

use rand::distr::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{AutodiffError, Gradients, Tape, Tensor, Var};
use crate::data::batch_indices;
use crate::fairret::{fairret_on, Fairret, FairretState, ProjectionSolverConfig};
use crate::statistics::{Statistic, StatisticKind, StatisticOptions};
use crate::{Error, Result, SampleBatch};

/// Logits are clamped to this magnitude before the sigmoid.
pub const LOGIT_CLAMP: f64 = 30.0;
const PROB_FLOOR: f64 = 1e-12;

/// Multilayer perceptron with rectified hidden layers and a single logit.
///
/// Hidden weights are `[fan_in, fan_out]` matrices; the output weight is a
/// `[fan_in]` vector and the output bias a `[1]` vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub hidden_sizes: Vec<usize>,
    pub weights: Vec<Tensor>,
    pub biases: Vec<Tensor>,
}

impl Mlp {
    /// Uniform initialization in `+-1/sqrt(fan_in)`.
    pub fn new(d_x: usize, hidden_sizes: &[usize], seed: u64) -> Result<Self> {
        if d_x == 0 || hidden_sizes.contains(&0) {
            return Err(Error::InvalidConfig("layer sizes must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        let mut fan_in = d_x;
        for &width in hidden_sizes.iter().chain(std::iter::once(&1)) {
            let bound = 1.0 / (fan_in as f64).sqrt();
            let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
            let w: Vec<f64> = (0..fan_in * width).map(|_| dist.sample(&mut rng)).collect();
            let b: Vec<f64> = (0..width).map(|_| dist.sample(&mut rng)).collect();
            let is_output = weights.len() == hidden_sizes.len();
            weights.push(if is_output {
                Tensor::vector(w)
            } else {
                Tensor::matrix(fan_in, width, w)?
            });
            biases.push(Tensor::vector(b));
            fan_in = width;
        }
        Ok(Self {
            hidden_sizes: hidden_sizes.to_vec(),
            weights,
            biases,
        })
    }

    /// Single logistic layer, `sigmoid(x w + b)`.
    pub fn linear(weight: Vec<f64>, bias: f64) -> Self {
        Self {
            hidden_sizes: Vec::new(),
            weights: vec![Tensor::vector(weight)],
            biases: vec![Tensor::vector(vec![bias])],
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weights[0].shape()[0]
    }

    pub fn num_parameters(&self) -> usize {
        self.parameters().map(Tensor::numel).sum()
    }

    /// Weights and biases interleaved per layer.
    pub fn parameters(&self) -> impl Iterator<Item = &Tensor> {
        self.weights
            .iter()
            .zip(&self.biases)
            .flat_map(|(w, b)| [w, b])
    }

    fn parameters_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.weights
            .iter_mut()
            .zip(self.biases.iter_mut())
            .flat_map(|(w, b)| [w, b])
    }

    /// Registers every parameter as a tape leaf, in [`Mlp::parameters`] order.
    pub fn leaves(&self, tape: &mut Tape) -> Vec<Var> {
        self.parameters().map(|p| tape.leaf(p.clone())).collect()
    }

    /// Records `sigmoid(a * clamp(logit))` with parameters already on the tape.
    pub fn forward_on(
        &self,
        tape: &mut Tape,
        params: &[Var],
        features: &Tensor,
        surrogate_scale: f64,
    ) -> Result<Var> {
        if !(surrogate_scale > 0.0 && surrogate_scale.is_finite()) {
            return Err(Error::InvalidConfig(
                "surrogate scale must be positive".into(),
            ));
        }
        if features.rank() != 2 || features.cols() != self.input_dim() {
            return Err(AutodiffError::Shape {
                op: "forward",
                lhs: features.shape().to_vec(),
                rhs: self.weights[0].shape().to_vec(),
            }
            .into());
        }
        let mut x = tape.constant(features.clone());
        let layers = self.weights.len();
        for (l, pair) in params.chunks(2).enumerate() {
            let z = tape.matmul(x, pair[0])?;
            x = if l + 1 < layers {
                let z = tape.add_bias(z, pair[1])?;
                tape.clamp(z, 0.0, f64::INFINITY)?
            } else {
                tape.add(z, pair[1])?
            };
        }
        let scaled = tape.mul_scalar(x, surrogate_scale)?;
        let logit = tape.clamp(scaled, -LOGIT_CLAMP, LOGIT_CLAMP)?;
        Ok(tape.sigmoid(logit)?)
    }

    /// Probabilities for every row of `features`.
    pub fn forward(&self, features: &Tensor, surrogate_scale: f64) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let params: Vec<Var> = self
            .parameters()
            .map(|p| tape.constant(p.clone()))
            .collect();
        let h = self.forward_on(&mut tape, &params, features, surrogate_scale)?;
        Ok(tape.value(h).data().to_vec())
    }
}

/// Mean binary cross-entropy with probabilities clamped away from 0 and 1.
pub fn bce_on(tape: &mut Tape, probabilities: Var, labels: &[f64]) -> Result<Var> {
    let p = tape.clamp(probabilities, PROB_FLOOR, 1.0 - PROB_FLOOR)?;
    if tape.value(p).numel() != labels.len() {
        return Err(AutodiffError::Shape {
            op: "bce",
            lhs: tape.value(p).shape().to_vec(),
            rhs: vec![labels.len()],
        }
        .into());
    }
    let y = tape.constant(Tensor::vector(labels.to_vec()));
    let not_y = tape.constant(Tensor::vector(labels.iter().map(|v| 1.0 - v).collect()));
    let log_p = tape.log(p)?;
    let not_p = tape.rsub_scalar(1.0, p)?;
    let log_not_p = tape.log(not_p)?;
    let a = tape.mul(y, log_p)?;
    let b = tape.mul(not_y, log_not_p)?;
    let ll = tape.add(a, b)?;
    let mean = tape.mean(ll)?;
    Ok(tape.neg(mean)?)
}

pub fn bce_loss(probabilities: &[f64], labels: &[f64]) -> Result<f64> {
    let mut tape = Tape::new();
    let p = tape.constant(Tensor::vector(probabilities.to_vec()));
    let loss = bce_on(&mut tape, p, labels)?;
    Ok(tape.value(loss).data()[0])
}

/// Fairness term of the objective.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FairnessTerm {
    pub fairret: Fairret,
    pub statistic: StatisticKind,
    /// Strength of the fairret in the objective.
    pub strength: f64,
}

/// Nodes of one objective evaluation.
#[derive(Debug, Clone, Copy)]
pub struct ObjectiveVars {
    pub loss: Var,
    pub bce: Var,
    /// `None` when the term was disabled or skipped.
    pub fairret: Option<Var>,
    /// The batch lacked a group or the overall statistic was degenerate.
    pub skipped: bool,
}

/// Records `bce + strength * fairret` on the tape. Degenerate batches drop
/// the fairness term.
pub fn objective_on(
    tape: &mut Tape,
    h: Var,
    batch: &SampleBatch,
    term: Option<(&FairnessTerm, &Statistic)>,
    solver: &ProjectionSolverConfig,
    state: &mut FairretState,
) -> Result<ObjectiveVars> {
    let bce = bce_on(tape, h, batch.labels())?;
    let Some((term, stat)) = term.filter(|(t, _)| t.strength > 0.0) else {
        return Ok(ObjectiveVars {
            loss: bce,
            bce,
            fairret: None,
            skipped: false,
        });
    };
    match fairret_on(tape, term.fairret, stat, batch, h, solver, state) {
        Ok(out) => {
            let weighted = tape.mul_scalar(out.loss, term.strength)?;
            Ok(ObjectiveVars {
                loss: tape.add(bce, weighted)?,
                bce,
                fairret: Some(out.loss),
                skipped: false,
            })
        }
        Err(Error::DegenerateGroup { .. } | Error::DegenerateOverall { .. }) => Ok(ObjectiveVars {
            loss: bce,
            bce,
            fairret: None,
            skipped: true,
        }),
        Err(e) => Err(e),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(model: &Mlp, learning_rate: f64) -> Self {
        let zeros: Vec<Vec<f64>> = model.parameters().map(|p| vec![0.0; p.numel()]).collect();
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update. Nothing changes if any gradient is non-finite.
    pub fn step(&mut self, model: &mut Mlp, grads: &[&[f64]]) -> Result<()> {
        if grads.len() != self.m.len() || grads.iter().zip(&self.m).any(|(g, m)| g.len() != m.len())
        {
            return Err(Error::InvalidConfig(
                "gradient shapes do not match the optimizer state".into(),
            ));
        }
        if grads.iter().any(|g| g.iter().any(|v| !v.is_finite())) {
            return Err(Error::Solver("non-finite parameter gradient".into()));
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (((p, g), m), v) in model
            .parameters_mut()
            .zip(grads)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            for (((p, &g), m), v) in p.data_mut().iter_mut().zip(g.iter()).zip(m).zip(v) {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                *p -= self.learning_rate * (*m / c1) / ((*v / c2).sqrt() + self.epsilon);
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Leading epochs trained without the fairret.
    pub warmup_epochs: usize,
    pub strength: f64,
    pub fairret: Fairret,
    pub statistic: StatisticKind,
    pub statistic_options: StatisticOptions,
    pub seed: u64,
    pub surrogate_scale: f64,
    pub hidden_sizes: Vec<usize>,
    pub solver: ProjectionSolverConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.001,
            batch_size: 4096,
            epochs: 100,
            warmup_epochs: 20,
            strength: 0.0,
            fairret: Fairret::SmoothMax,
            statistic: StatisticKind::DemographicParity,
            statistic_options: StatisticOptions::default(),
            seed: 0,
            surrogate_scale: 1.0,
            hidden_sizes: vec![256, 128, 32],
            solver: ProjectionSolverConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if !(self.learning_rate > 0.0) {
            return fail("learning_rate must be positive");
        }
        if self.batch_size == 0 {
            return fail("batch_size must be at least 1");
        }
        if self.warmup_epochs > self.epochs {
            return fail("warmup_epochs exceeds epochs");
        }
        if !(self.strength >= 0.0 && self.strength.is_finite()) {
            return fail("strength must be a finite non-negative number");
        }
        if !(self.surrogate_scale > 0.0 && self.surrogate_scale.is_finite()) {
            return fail("surrogate_scale must be positive");
        }
        self.solver.validate()
    }

    pub fn fairness_term(&self) -> FairnessTerm {
        FairnessTerm {
            fairret: self.fairret,
            statistic: self.statistic,
            strength: self.strength,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    /// Batch-averaged cross-entropy.
    pub bce: f64,
    /// Batch-averaged fairret over batches where it was evaluated.
    pub fairret: Option<f64>,
    pub loss: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Mlp,
    pub epochs: Vec<EpochMetrics>,
    pub skipped_batches: usize,
    pub capped_solves: usize,
    pub seconds: f64,
}

/// Gradient of the full objective for every parameter, along with its value.
pub fn objective_gradients(
    model: &Mlp,
    batch: &SampleBatch,
    config: &TrainConfig,
    with_fairret: bool,
    state: &mut FairretState,
) -> Result<(f64, Vec<Vec<f64>>)> {
    let stat = Statistic::with_options(config.statistic, &config.statistic_options)?;
    let term = config.fairness_term();
    let mut tape = Tape::new();
    let params = model.leaves(&mut tape);
    let h = model.forward_on(&mut tape, &params, batch.features(), config.surrogate_scale)?;
    let vars = objective_on(
        &mut tape,
        h,
        batch,
        with_fairret.then_some((&term, &stat)),
        &config.solver,
        state,
    )?;
    let grads: Gradients = tape.backward(vars.loss)?;
    Ok((
        tape.value(vars.loss).data()[0],
        params.iter().map(|&p| grads.wrt(p).to_vec()).collect(),
    ))
}

/// Trains a fresh network on `train`.
pub fn train(train: &SampleBatch, config: &TrainConfig) -> Result<TrainOutcome> {
    config.validate()?;
    let start = Instant::now();
    let stat = Statistic::with_options(config.statistic, &config.statistic_options)?;
    let term = config.fairness_term();
    let mut model = Mlp::new(train.d_x(), &config.hidden_sizes, config.seed)?;
    let mut adam = Adam::new(&model, config.learning_rate);
    let mut state = FairretState::new();
    let mut skipped_batches = 0;
    let mut epochs = Vec::with_capacity(config.epochs);

    for epoch in 1..=config.epochs {
        let active = epoch > config.warmup_epochs;
        let (mut bce_sum, mut loss_sum, mut fair_sum) = (0.0, 0.0, 0.0);
        let (mut count, mut fair_count) = (0usize, 0usize);
        for indices in batch_indices(train.n(), config.batch_size, config.seed, epoch as u64) {
            let batch = train.select(&indices);
            let mut tape = Tape::new();
            let params = model.leaves(&mut tape);
            let h =
                model.forward_on(&mut tape, &params, batch.features(), config.surrogate_scale)?;
            let vars = objective_on(
                &mut tape,
                h,
                &batch,
                active.then_some((&term, &stat)),
                &config.solver,
                &mut state,
            )?;
            let grads = tape.backward(vars.loss)?;
            let grads: Vec<&[f64]> = params.iter().map(|&p| grads.wrt(p)).collect();
            adam.step(&mut model, &grads)?;

            skipped_batches += usize::from(vars.skipped);
            bce_sum += tape.value(vars.bce).data()[0];
            loss_sum += tape.value(vars.loss).data()[0];
            if let Some(r) = vars.fairret {
                fair_sum += tape.value(r).data()[0];
                fair_count += 1;
            }
            count += 1;
        }
        let loss = loss_sum / count as f64;
        if !loss.is_finite() {
            return Err(Error::Solver(format!("non-finite loss in epoch {epoch}")));
        }
        epochs.push(EpochMetrics {
            epoch,
            bce: bce_sum / count as f64,
            fairret: (fair_count > 0).then(|| fair_sum / fair_count as f64),
            loss,
        });
    }
    Ok(TrainOutcome {
        model,
        epochs,
        skipped_batches,
        capped_solves: state.capped_solves,
        seconds: start.elapsed().as_secs_f64(),
    })
}
