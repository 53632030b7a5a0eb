//! Metrics, experiment grids and reporting.

mod grid;
mod plot;

pub use grid::{
    evaluate, key_of, read_results, run_cell, run_grid, train_and_evaluate, Cell, DataSource,
    GridReport, GridSpec, LoadedData, ResultRow, RunResult, EVALUATED,
};
pub use plot::scatter_svg;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::fairret::smoothmax_fairret;
use crate::statistics::{violation, violation_on, Statistic};
use crate::{Error, Result, SampleBatch};

/// Area under the ROC curve from average ranks, counting ties as one half.
pub fn auroc(scores: &[f64], labels: &[f64]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::InvalidBatch(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    let positives = labels.iter().filter(|&&y| y == 1.0).count();
    let negatives = labels.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(Error::UndefinedMetric("AUROC needs both classes".into()));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::UndefinedMetric("AUROC of NaN scores".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Doubled ranks keep tie averages integral.
    let mut positive_rank_sum2 = 0u128;
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && scores[order[end]] == scores[order[start]] {
            end += 1;
        }
        let doubled_rank = (start + 1 + end) as u128;
        let tied_positives = order[start..end]
            .iter()
            .filter(|&&i| labels[i] == 1.0)
            .count() as u128;
        positive_rank_sum2 += doubled_rank * tied_positives;
        start = end;
    }
    let p = positives as u128;
    let u2 = positive_rank_sum2 - p * (p + 1);
    Ok(u2 as f64 / (2 * p * negatives as u128) as f64)
}

/// Largest entry of the violation vector.
pub fn max_violation(stat: &Statistic, batch: &SampleBatch, h: &[f64]) -> Result<f64> {
    Ok(violation(stat, batch, h)?.max())
}

/// Mean and standard error covariance of a cloud of (violation, AUROC) points.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EllipseStats {
    pub mean: [f64; 2],
    /// Sample covariance divided by the number of points.
    pub covariance: [[f64; 2]; 2],
    pub count: usize,
}

pub fn ellipse_stats(points: &[[f64; 2]]) -> Result<EllipseStats> {
    let n = points.len();
    if n < 2 {
        return Err(Error::UndefinedMetric(
            "ellipse statistics need at least two points".into(),
        ));
    }
    let nf = n as f64;
    let mean = [
        points.iter().map(|p| p[0]).sum::<f64>() / nf,
        points.iter().map(|p| p[1]).sum::<f64>() / nf,
    ];
    let mut covariance = [[0.0; 2]; 2];
    for p in points {
        let d = [p[0] - mean[0], p[1] - mean[1]];
        for a in 0..2 {
            for b in 0..2 {
                covariance[a][b] += d[a] * d[b];
            }
        }
    }
    for row in &mut covariance {
        for v in row {
            *v /= (nf - 1.0) * nf;
        }
    }
    Ok(EllipseStats {
        mean,
        covariance,
        count: n,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchStudyRow {
    pub size: usize,
    /// Chunks whose SmoothMax could be evaluated.
    pub chunks: usize,
    /// Chunks dropped because a group was missing.
    pub skipped: usize,
    pub chunked_mean: f64,
    pub full: f64,
}

impl BatchStudyRow {
    pub fn relative_error(&self) -> f64 {
        (self.chunked_mean - self.full).abs() / self.full.abs().max(f64::MIN_POSITIVE)
    }
}

fn smoothmax_value(stat: &Statistic, batch: &SampleBatch, h: &[f64]) -> Result<f64> {
    let mut tape = Tape::new();
    let hv = tape.constant(crate::autodiff::Tensor::vector(h.to_vec()));
    let v = violation_on(&mut tape, stat, batch, hv)?;
    let r = smoothmax_fairret(&mut tape, v.values)?;
    Ok(tape.value(r).data()[0])
}

/// SmoothMax averaged over contiguous chunks of each size, next to its value
/// on the whole set.
pub fn batch_size_study(
    stat: &Statistic,
    batch: &SampleBatch,
    h: &[f64],
    sizes: &[usize],
) -> Result<Vec<BatchStudyRow>> {
    let full = smoothmax_value(stat, batch, h)?;
    let n = batch.n();
    sizes
        .iter()
        .map(|&size| {
            if size == 0 || size > n {
                return Err(Error::InvalidConfig(format!(
                    "chunk size {size} is not in 1..={n}"
                )));
            }
            let (mut sum, mut chunks, mut skipped) = (0.0, 0, 0);
            for start in (0..n).step_by(size) {
                let idx: Vec<usize> = (start..(start + size).min(n)).collect();
                let chunk = batch.select(&idx);
                let hs: Vec<f64> = idx.iter().map(|&i| h[i]).collect();
                match smoothmax_value(stat, &chunk, &hs) {
                    Ok(v) => {
                        sum += v;
                        chunks += 1;
                    }
                    Err(Error::DegenerateGroup { .. } | Error::DegenerateOverall { .. }) => {
                        skipped += 1
                    }
                    Err(e) => return Err(e),
                }
            }
            Ok(BatchStudyRow {
                size,
                chunks,
                skipped,
                chunked_mean: if chunks > 0 {
                    sum / chunks as f64
                } else {
                    f64::NAN
                },
                full,
            })
        })
        .collect()
}
