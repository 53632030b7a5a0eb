#![allow(dead_code)]

use fairgrad::autodiff::Tensor;
use fairgrad::fairret::{divergence, DivergenceKind};
use fairgrad::statistics::LinearConstraintSystem;
use fairgrad::SampleBatch;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn one_hot_rows(groups: &[usize], d_s: usize) -> Tensor {
    let rows: Vec<Vec<f64>> = groups
        .iter()
        .map(|&g| (0..d_s).map(|k| f64::from(k == g)).collect())
        .collect();
    Tensor::from_rows(&rows).unwrap()
}

pub fn partition_batch(groups: &[usize], labels: &[f64], d_s: usize) -> SampleBatch {
    SampleBatch::new(
        Tensor::zeros(&[groups.len(), 1]),
        labels.to_vec(),
        one_hot_rows(groups, d_s),
    )
    .unwrap()
}

/// Random one-hot batch where every group holds both labels.
pub fn random_partition_batch(rng: &mut ChaCha8Rng, n: usize, d_s: usize) -> SampleBatch {
    assert!(n >= 2 * d_s);
    let mut groups: Vec<usize> = (0..n)
        .map(|i| {
            if i < 2 * d_s {
                i / 2
            } else {
                rng.random_range(0..d_s)
            }
        })
        .collect();
    let mut labels: Vec<f64> = (0..n)
        .map(|i| {
            if i < 2 * d_s {
                (i % 2) as f64
            } else {
                f64::from(rng.random_bool(0.4))
            }
        })
        .collect();
    // Shuffle jointly so the guaranteed members are not always first.
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        groups.swap(i, j);
        labels.swap(i, j);
    }
    partition_batch(&groups, &labels, d_s)
}

pub fn random_scores(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

fn grid_points(resolution: f64) -> Vec<f64> {
    let steps = (1.0 / resolution).round() as usize;
    (0..=steps).map(|i| i as f64 / steps as f64).collect()
}

/// Exhaustive search for the projection of `h` onto `sys` at the given grid
/// resolution. Only one-hot systems with at most three members per group are
/// supported: each group's constraint is solved for its member with the
/// largest `|beta|`, every other member is searched on the grid.
pub fn brute_force_projection(
    kind: DivergenceKind,
    sys: &LinearConstraintSystem,
    h: &[f64],
    resolution: f64,
) -> Option<Vec<f64>> {
    let grid = grid_points(resolution);
    let mut f = vec![f64::NAN; h.len()];
    for members in &sys.members {
        if members.is_empty() {
            continue;
        }
        assert!(
            members.len() <= 3,
            "oracle supports at most three members per group"
        );
        assert!(members.iter().all(|&(_, s)| s == 1.0));
        let pivot_pos = (0..members.len())
            .max_by(|&a, &b| {
                sys.beta[members[a].0]
                    .abs()
                    .total_cmp(&sys.beta[members[b].0].abs())
            })
            .unwrap();
        let pivot = members[pivot_pos].0;
        let free: Vec<usize> = members
            .iter()
            .map(|&(i, _)| i)
            .filter(|&i| i != pivot)
            .collect();
        let offset: f64 = members.iter().map(|&(i, _)| sys.alpha[i]).sum();

        let mut best: Option<(f64, Vec<f64>)> = None;
        let mut assignment = vec![0usize; free.len()];
        loop {
            let values: Vec<f64> = assignment.iter().map(|&a| grid[a]).collect();
            let moved: f64 = free
                .iter()
                .zip(&values)
                .map(|(&i, &v)| sys.beta[i] * v)
                .sum();
            let fp = -(offset + moved) / sys.beta[pivot];
            if (0.0..=1.0).contains(&fp) {
                let mut cost = divergence(kind, fp, h[pivot]).unwrap();
                for (&i, &v) in free.iter().zip(&values) {
                    cost += divergence(kind, v, h[i]).unwrap();
                }
                if best.as_ref().is_none_or(|(c, _)| cost < *c) {
                    let mut point = values.clone();
                    point.push(fp);
                    best = Some((cost, point));
                }
            }
            // Odometer over the free coordinates.
            let mut k = 0;
            loop {
                if k == assignment.len() {
                    break;
                }
                assignment[k] += 1;
                if assignment[k] < grid.len() {
                    break;
                }
                assignment[k] = 0;
                k += 1;
            }
            if k == assignment.len() {
                break;
            }
        }
        let (_, point) = best?;
        for (&i, &v) in free.iter().zip(&point) {
            f[i] = v;
        }
        f[pivot] = point[free.len()];
    }
    Some(f)
}

pub fn mean_divergence(kind: DivergenceKind, f: &[f64], h: &[f64]) -> f64 {
    f.iter()
        .zip(h)
        .map(|(&a, &b)| divergence(kind, a, b).unwrap())
        .sum::<f64>()
        / h.len() as f64
}

/// Pairwise AUROC over all positive-negative pairs.
pub fn brute_force_auroc(scores: &[f64], labels: &[f64]) -> f64 {
    let mut wins = 0.0;
    let mut pairs = 0.0;
    for (i, &yi) in labels.iter().enumerate() {
        if yi != 1.0 {
            continue;
        }
        for (j, &yj) in labels.iter().enumerate() {
            if yj != 0.0 {
                continue;
            }
            pairs += 1.0;
            if scores[i] > scores[j] {
                wins += 1.0;
            } else if scores[i] == scores[j] {
                wins += 0.5;
            }
        }
    }
    wins / pairs
}
