mod common;

use common::*;
use fairgrad::autodiff::{Tape, Tensor, Var};
use fairgrad::data::{synthesize, SyntheticSpec};
use fairgrad::fairret::{
    fairret_on, projection_fairret_on, solve_projection, DivergenceKind, Fairret, FairretState,
    ProjectionSolverConfig,
};
use fairgrad::harness::max_violation;
use fairgrad::model::{bce_on, objective_gradients, train, Adam, Mlp, TrainConfig};
use fairgrad::statistics::{Statistic, StatisticKind};
use fairgrad::SampleBatch;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

fn small_batch(seed: u64, n: usize, d_x: usize) -> SampleBatch {
    let mut r = rng(seed);
    let base = random_partition_batch(&mut r, n, 2);
    let rows: Vec<Vec<f64>> = (0..n)
        .map(|_| (0..d_x).map(|_| StandardNormal.sample(&mut r)).collect())
        .collect();
    base.with_features(Tensor::from_rows(&rows).unwrap())
        .unwrap()
}

fn perturbed(model: &Mlp, tensor: usize, index: usize, delta: f64) -> Mlp {
    let mut m = model.clone();
    let t = if tensor % 2 == 0 {
        &mut m.weights[tensor / 2]
    } else {
        &mut m.biases[tensor / 2]
    };
    t.data_mut()[index] += delta;
    m
}

fn tensor_len(model: &Mlp, tensor: usize) -> usize {
    model.parameters().nth(tensor).unwrap().numel()
}

fn objective_value(model: &Mlp, batch: &SampleBatch, config: &TrainConfig) -> f64 {
    objective_gradients(model, batch, config, true, &mut FairretState::new())
        .unwrap()
        .0
}

#[test]
fn end_to_end_gradient_matches_finite_differences_on_a_parameter_slice() {
    let batch = small_batch(1, 64, 5);
    let model = Mlp::new(5, &[8, 4], 3).unwrap();
    let mut r = rng(9);
    for fairret in [
        Fairret::SmoothMax,
        Fairret::Norm(fairgrad::fairret::NormOrder::L2),
    ] {
        let config = TrainConfig {
            strength: 1.0,
            fairret,
            hidden_sizes: vec![8, 4],
            ..TrainConfig::default()
        };
        let (_, grads) =
            objective_gradients(&model, &batch, &config, true, &mut FairretState::new()).unwrap();
        for _ in 0..5 {
            let tensor = r.random_range(0..grads.len());
            let index = r.random_range(0..tensor_len(&model, tensor));
            let step = 1e-6;
            let up = objective_value(&perturbed(&model, tensor, index, step), &batch, &config);
            let down = objective_value(&perturbed(&model, tensor, index, -step), &batch, &config);
            let numeric = (up - down) / (2.0 * step);
            let analytic = grads[tensor][index];
            let rel = (numeric - analytic).abs() / analytic.abs().max(1e-6);
            assert!(
                rel < 1e-3,
                "{fairret} tensor {tensor}[{index}]: tape {analytic} numeric {numeric}"
            );
        }
    }
}

/// Objective with the projection held fixed, as a function of the parameters.
fn frozen_projection_objective(
    model: &Mlp,
    batch: &SampleBatch,
    f_star: &[f64],
    kind: DivergenceKind,
) -> (f64, Vec<Vec<f64>>) {
    let mut tape = Tape::new();
    let params = model.leaves(&mut tape);
    let h = model
        .forward_on(&mut tape, &params, batch.features(), 1.0)
        .unwrap();
    let bce = bce_on(&mut tape, h, batch.labels()).unwrap();
    let r = projection_fairret_on(&mut tape, kind, f_star, h).unwrap();
    let loss = tape.add(bce, r).unwrap();
    let grads = tape.backward(loss).unwrap();
    (
        tape.value(loss).data()[0],
        params.iter().map(|&p| grads.wrt(p).to_vec()).collect(),
    )
}

#[test]
fn projection_objective_gradient_matches_finite_differences_with_frozen_projection() {
    let batch = small_batch(4, 64, 5);
    let model = Mlp::new(5, &[8, 4], 6).unwrap();
    let st = Statistic::new(StatisticKind::DemographicParity).unwrap();
    let h = model.forward(batch.features(), 1.0).unwrap();
    let mut r = rng(12);
    for kind in [DivergenceKind::Kl, DivergenceKind::Js, DivergenceKind::Sed] {
        let f_star = solve_projection(
            kind,
            &st,
            &batch,
            &h,
            &ProjectionSolverConfig::full_convergence(),
            None,
        )
        .unwrap()
        .f_star;
        let (_, grads) = frozen_projection_objective(&model, &batch, &f_star, kind);
        for _ in 0..5 {
            let tensor = r.random_range(0..grads.len());
            let index = r.random_range(0..tensor_len(&model, tensor));
            let step = 1e-6;
            let up = frozen_projection_objective(
                &perturbed(&model, tensor, index, step),
                &batch,
                &f_star,
                kind,
            )
            .0;
            let down = frozen_projection_objective(
                &perturbed(&model, tensor, index, -step),
                &batch,
                &f_star,
                kind,
            )
            .0;
            let numeric = (up - down) / (2.0 * step);
            let analytic = grads[tensor][index];
            let rel = (numeric - analytic).abs() / analytic.abs().max(1e-6);
            assert!(
                rel < 1e-3,
                "{kind} tensor {tensor}[{index}]: tape {analytic} numeric {numeric}"
            );
        }
    }
}

/// Parameter gradient of `sum_i h_i g_i` for a constant vector `g`.
fn pulled_back(model: &Mlp, batch: &SampleBatch, g: &[f64]) -> Vec<Vec<f64>> {
    let mut tape = Tape::new();
    let params = model.leaves(&mut tape);
    let h = model
        .forward_on(&mut tape, &params, batch.features(), 1.0)
        .unwrap();
    let gv = tape.constant(Tensor::vector(g.to_vec()));
    let weighted = tape.mul(h, gv).unwrap();
    let total = tape.sum(weighted).unwrap();
    let grads = tape.backward(total).unwrap();
    params.iter().map(|&p| grads.wrt(p).to_vec()).collect()
}

#[test]
fn fairret_parameter_gradient_factors_through_the_scores() {
    let batch = small_batch(7, 48, 4);
    let model = Mlp::new(4, &[6], 2).unwrap();
    let st = Statistic::new(StatisticKind::EqualOpportunity).unwrap();
    for fairret in Fairret::ALL {
        let mut tape = Tape::new();
        let params = model.leaves(&mut tape);
        let h: Var = model
            .forward_on(&mut tape, &params, batch.features(), 1.0)
            .unwrap();
        let out = fairret_on(
            &mut tape,
            fairret,
            &st,
            &batch,
            h,
            &ProjectionSolverConfig::full_convergence(),
            &mut FairretState::new(),
        )
        .unwrap();
        let grads = tape.backward(out.loss).unwrap();
        let dr_dh = grads.wrt(h).to_vec();
        let direct: Vec<Vec<f64>> = params.iter().map(|&p| grads.wrt(p).to_vec()).collect();

        let chained = pulled_back(&model, &batch, &dr_dh);
        for (a, b) in direct.iter().flatten().zip(chained.iter().flatten()) {
            assert!(
                (a - b).abs() <= 1e-12 * (1.0 + a.abs()),
                "{fairret}: {a} vs {b}"
            );
        }
        let zeroed = pulled_back(&model, &batch, &vec![0.0; dr_dh.len()]);
        assert!(zeroed.iter().flatten().all(|&g| g == 0.0));
    }
}

#[test]
fn random_steps_never_produce_non_finite_losses() {
    let mut r = rng(77);
    let mut model = Mlp::new(3, &[4], 5).unwrap();
    let mut adam = Adam::new(&model, 0.5);
    let stats = [
        StatisticKind::DemographicParity,
        StatisticKind::EqualOpportunity,
        StatisticKind::PredictiveParity,
        StatisticKind::TreatmentEquality,
    ];
    for step in 0..100_000 {
        let mut batch = random_partition_batch(&mut r, 8, 2);
        let scale = if step % 3 == 0 { 50.0 } else { 1.0 };
        let rows: Vec<Vec<f64>> = (0..8)
            .map(|_| {
                (0..3)
                    .map(|_| {
                        let z: f64 = StandardNormal.sample(&mut r);
                        scale * z
                    })
                    .collect()
            })
            .collect();
        batch = batch
            .with_features(Tensor::from_rows(&rows).unwrap())
            .unwrap();
        let config = TrainConfig {
            strength: r.random_range(0.0..5.0),
            fairret: Fairret::ALL[step % 7],
            statistic: stats[(step / 7) % 4],
            hidden_sizes: vec![4],
            ..TrainConfig::default()
        };
        let (loss, grads) =
            objective_gradients(&model, &batch, &config, true, &mut FairretState::new())
                .unwrap_or_else(|e| panic!("step {step}: {e}"));
        assert!(loss.is_finite(), "step {step}: loss {loss}");
        let refs: Vec<&[f64]> = grads.iter().map(|g| g.as_slice()).collect();
        adam.step(&mut model, &refs)
            .unwrap_or_else(|e| panic!("step {step}: {e}"));
    }
}

fn biased_data(seed: u64) -> SampleBatch {
    synthesize(&SyntheticSpec {
        n: 4000,
        d_x: 6,
        base_rates: vec![0.5, 0.5],
        shift: vec![0.15, -0.15],
        feature_shift: 3.0,
        noise: 0.5,
        seed,
        ..SyntheticSpec::default()
    })
    .unwrap()
    .batch
}

fn quick_config() -> TrainConfig {
    TrainConfig {
        learning_rate: 0.01,
        batch_size: 500,
        epochs: 30,
        warmup_epochs: 5,
        hidden_sizes: vec![16],
        ..TrainConfig::default()
    }
}

#[test]
fn identical_seeds_train_identical_models() {
    let data = biased_data(3);
    let config = TrainConfig {
        strength: 1.0,
        fairret: Fairret::Projection(DivergenceKind::Kl),
        epochs: 8,
        ..quick_config()
    };
    let a = train(&data, &config).unwrap();
    let b = train(&data, &config).unwrap();
    assert_eq!(a.model, b.model);
    assert_eq!(a.epochs, b.epochs);
    let c = train(&data, &TrainConfig { seed: 1, ..config }).unwrap();
    assert_ne!(a.model, c.model);
}

#[test]
fn fairness_strength_lowers_the_violation_of_a_biased_model() {
    let data = biased_data(5);
    let dp = Statistic::new(StatisticKind::DemographicParity).unwrap();
    let unfair = train(&data, &quick_config()).unwrap();
    let h0 = unfair.model.forward(data.features(), 1.0).unwrap();
    let v0 = max_violation(&dp, &data, &h0).unwrap();
    assert!(v0 > 0.1, "unconstrained violation {v0}");

    let fair = train(
        &data,
        &TrainConfig {
            strength: 10.0,
            ..quick_config()
        },
    )
    .unwrap();
    let h1 = fair.model.forward(data.features(), 1.0).unwrap();
    let v1 = max_violation(&dp, &data, &h1).unwrap();
    assert!(v1 < v0, "strength 10 gives {v1}, unconstrained {v0}");
    assert!(fair.epochs.iter().skip(5).all(|e| e.fairret.is_some()));
    assert!(fair.epochs.iter().take(5).all(|e| e.fairret.is_none()));
}
