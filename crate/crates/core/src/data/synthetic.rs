use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::{Error, Result, SampleBatch};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelMode {
    /// Independent Bernoulli draws from the generating scores.
    #[default]
    Bernoulli,
    /// Within each group, exactly `round(target * size)` positives, picked by
    /// thresholding logistic noise on the generating logits.
    Exact,
}

/// Parameters of a synthetic dataset with one-hot groups.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub n: usize,
    pub d_x: usize,
    /// Group proportions, summing to one.
    pub proportions: Vec<f64>,
    pub base_rates: Vec<f64>,
    /// Added to each group's base rate to inject disparity.
    pub shift: Vec<f64>,
    /// Offset of each group's feature mean along the first feature, per group index.
    pub feature_shift: f64,
    /// Scale dividing the feature signal in the generating logits.
    pub noise: f64,
    pub seed: u64,
    pub label_mode: LabelMode,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            n: 10_000,
            d_x: 8,
            proportions: vec![0.5, 0.5],
            base_rates: vec![0.4, 0.4],
            shift: vec![0.0, 0.0],
            feature_shift: 1.0,
            noise: 1.0,
            seed: 0,
            label_mode: LabelMode::Bernoulli,
        }
    }
}

impl SyntheticSpec {
    /// Per-group mean generating score.
    pub fn target_rates(&self) -> Vec<f64> {
        self.base_rates
            .iter()
            .zip(&self.shift)
            .map(|(b, s)| b + s)
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::InvalidConfig(m));
        let d_s = self.proportions.len();
        if d_s == 0 || self.base_rates.len() != d_s || self.shift.len() != d_s {
            return fail(
                "proportions, base_rates and shift must have the same non-zero length".into(),
            );
        }
        if self.n < d_s || self.d_x == 0 {
            return fail("n must cover every group and d_x must be positive".into());
        }
        if self.proportions.iter().any(|&p| !(p > 0.0))
            || (self.proportions.iter().sum::<f64>() - 1.0).abs() > 1e-9
        {
            return fail("proportions must be positive and sum to 1".into());
        }
        if let Some(b) = self.base_rates.iter().find(|&&b| !(b > 0.0 && b < 1.0)) {
            return fail(format!("base rate {b} is not in (0, 1)"));
        }
        if let Some(t) = self.target_rates().iter().find(|&&t| !(t > 0.0 && t < 1.0)) {
            return fail(format!("shifted rate {t} is not in (0, 1)"));
        }
        if !(self.noise > 0.0 && self.noise.is_finite()) || !self.feature_shift.is_finite() {
            return fail("noise must be positive and feature_shift finite".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticData {
    pub batch: SampleBatch,
    /// Generating probability of a positive label per sample.
    pub bayes_scores: Vec<f64>,
    pub groups: Vec<usize>,
    /// Largest difference between group means of the generating scores.
    pub measured_gap: f64,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Group sizes by largest remainder.
fn group_sizes(n: usize, proportions: &[f64]) -> Vec<usize> {
    let raw: Vec<f64> = proportions.iter().map(|p| p * n as f64).collect();
    let mut sizes: Vec<usize> = raw.iter().map(|r| r.floor() as usize).collect();
    let mut order: Vec<usize> = (0..raw.len()).collect();
    order.sort_by(|&a, &b| {
        (raw[b] - raw[b].floor())
            .total_cmp(&(raw[a] - raw[a].floor()))
            .then(a.cmp(&b))
    });
    let missing = n - sizes.iter().sum::<usize>();
    for &k in order.iter().cycle().take(missing) {
        sizes[k] += 1;
    }
    sizes
}

/// Intercept `b` with `mean(sigmoid(z + b)) = target`.
fn calibrate(z: &[f64], target: f64) -> f64 {
    let mean_at = |b: f64| z.iter().map(|&v| sigmoid(v + b)).sum::<f64>() / z.len() as f64;
    let (mut lo, mut hi) = (-60.0, 60.0);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mean_at(mid) < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Draws a dataset whose groups differ in feature means and label rates.
///
/// Generating logits are `w . x / noise + b_g` with a random unit vector `w`.
/// The intercepts `b_g` are calibrated on the draw so that each group's mean
/// generating score equals its base rate plus shift.
pub fn synthesize(spec: &SyntheticSpec) -> Result<SyntheticData> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let d_s = spec.proportions.len();
    let sizes = group_sizes(spec.n, &spec.proportions);
    let mut groups: Vec<usize> = sizes
        .iter()
        .enumerate()
        .flat_map(|(k, &m)| vec![k; m])
        .collect();
    rand::seq::SliceRandom::shuffle(groups.as_mut_slice(), &mut rng);

    let mut w: Vec<f64> = (0..spec.d_x)
        .map(|_| StandardNormal.sample(&mut rng))
        .collect();
    let norm = w.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
    w.iter_mut().for_each(|v| *v /= norm);

    let mut x = Vec::with_capacity(spec.n * spec.d_x);
    let mut z = Vec::with_capacity(spec.n);
    for &g in &groups {
        let row: Vec<f64> = (0..spec.d_x)
            .map(|j| {
                let e: f64 = StandardNormal.sample(&mut rng);
                if j == 0 {
                    e + spec.feature_shift * g as f64
                } else {
                    e
                }
            })
            .collect();
        z.push(row.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>() / spec.noise);
        x.extend(row);
    }

    let targets = spec.target_rates();
    let mut intercepts = vec![0.0; d_s];
    for k in 0..d_s {
        let zk: Vec<f64> = z
            .iter()
            .zip(&groups)
            .filter(|(_, &g)| g == k)
            .map(|(v, _)| *v)
            .collect();
        intercepts[k] = calibrate(&zk, targets[k]);
    }
    let logits: Vec<f64> = z
        .iter()
        .zip(&groups)
        .map(|(v, &g)| v + intercepts[g])
        .collect();
    let bayes_scores: Vec<f64> = logits.iter().map(|&l| sigmoid(l)).collect();

    let unit = Uniform::new(0.0f64, 1.0).expect("valid range");
    let labels: Vec<f64> = match spec.label_mode {
        LabelMode::Bernoulli => bayes_scores
            .iter()
            .map(|&p| f64::from(unit.sample(&mut rng) < p))
            .collect(),
        LabelMode::Exact => {
            let noisy: Vec<f64> = logits
                .iter()
                .map(|&l| {
                    let u: f64 = unit.sample(&mut rng).clamp(1e-300, 1.0 - 1e-16);
                    l + (u / (1.0 - u)).ln()
                })
                .collect();
            let mut labels = vec![0.0; spec.n];
            for k in 0..d_s {
                let mut members: Vec<usize> = (0..spec.n).filter(|&i| groups[i] == k).collect();
                members.sort_by(|&a, &b| noisy[b].total_cmp(&noisy[a]));
                let positives = (targets[k] * sizes[k] as f64).round() as usize;
                for &i in members.iter().take(positives) {
                    labels[i] = 1.0;
                }
            }
            labels
        }
    };

    let mut means = vec![0.0; d_s];
    for (&p, &g) in bayes_scores.iter().zip(&groups) {
        means[g] += p / sizes[g] as f64;
    }
    let measured_gap = means.iter().copied().fold(f64::MIN, f64::max)
        - means.iter().copied().fold(f64::MAX, f64::min);

    let mut s = vec![0.0; spec.n * d_s];
    for (i, &g) in groups.iter().enumerate() {
        s[i * d_s + g] = 1.0;
    }
    let batch = SampleBatch::new(
        Tensor::matrix(spec.n, spec.d_x, x)?,
        labels,
        Tensor::matrix(spec.n, d_s, s)?,
    )?;
    Ok(SyntheticData {
        batch,
        bayes_scores,
        groups,
        measured_gap,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn group_sizes_are_exact() {
        assert_eq!(group_sizes(10, &[0.5, 0.5]), vec![5, 5]);
        assert_eq!(
            group_sizes(10, &[0.34, 0.33, 0.33]).iter().sum::<usize>(),
            10
        );
    }

    #[test]
    fn calibrated_group_means() {
        let data = synthesize(&SyntheticSpec {
            n: 4000,
            base_rates: vec![0.3, 0.3],
            shift: vec![0.15, -0.15],
            seed: 5,
            ..SyntheticSpec::default()
        })
        .unwrap();
        assert!((data.measured_gap - 0.3).abs() < 1e-9);
        assert_eq!(data.batch.n(), 4000);
        assert!(data.batch.is_partition());
    }

    #[test]
    fn exact_labels_hit_base_rates() {
        let data = synthesize(&SyntheticSpec {
            n: 1000,
            base_rates: vec![0.3, 0.3],
            shift: vec![0.0, 0.0],
            label_mode: LabelMode::Exact,
            seed: 2,
            ..SyntheticSpec::default()
        })
        .unwrap();
        for k in 0..2 {
            let (pos, total) = data
                .groups
                .iter()
                .zip(data.batch.labels())
                .filter(|(&g, _)| g == k)
                .fold((0.0, 0.0), |(p, t), (_, &y)| (p + y, t + 1.0));
            assert_eq!(pos / total, 0.3);
        }
    }

    #[test]
    fn rejects_infeasible_rates() {
        let spec = SyntheticSpec {
            base_rates: vec![0.9, 0.5],
            shift: vec![0.2, 0.0],
            ..SyntheticSpec::default()
        };
        assert!(synthesize(&spec).is_err());
        assert!(synthesize(&SyntheticSpec {
            proportions: vec![0.5, 0.6],
            ..SyntheticSpec::default()
        })
        .is_err());
    }

    #[test]
    fn seeded() {
        let spec = SyntheticSpec {
            n: 200,
            ..SyntheticSpec::default()
        };
        assert_eq!(
            synthesize(&spec).unwrap().batch,
            synthesize(&spec).unwrap().batch
        );
    }
}
