//! Dataset loading, splitting, standardization and mini-batching.

mod schema;
mod synthetic;

pub use schema::{
    load_dataset, CategoryEncoder, DatasetEncoder, DatasetSchema, FeatureKind, FeatureSpec, Recode,
    RowFilter, SensitiveKind, SensitiveSpec, Table,
};
pub use synthetic::{synthesize, LabelMode, SyntheticData, SyntheticSpec};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::{Error, Result, SampleBatch};

/// Seeded permutation of `0..n`. Distinct streams give independent permutations
/// for the same seed.
pub fn permutation(n: usize, seed: u64, stream: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng);
    idx
}

/// Shuffled train and test row indices.
pub fn split_indices(n: usize, ratio: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::InvalidConfig(format!(
            "split ratio {ratio} is not in (0, 1)"
        )));
    }
    let cut = (n as f64 * ratio).round() as usize;
    if cut == 0 || cut == n {
        return Err(Error::InvalidConfig(format!(
            "split ratio {ratio} leaves an empty side for {n} rows"
        )));
    }
    let mut perm = permutation(n, seed, u64::MAX);
    let test = perm.split_off(cut);
    Ok((perm, test))
}

pub fn split(batch: &SampleBatch, ratio: f64, seed: u64) -> Result<(SampleBatch, SampleBatch)> {
    let (train, test) = split_indices(batch.n(), ratio, seed)?;
    Ok((batch.select(&train), batch.select(&test)))
}

/// Row indices of every mini-batch of one epoch. The final batch may be short.
pub fn batch_indices(n: usize, batch_size: usize, seed: u64, epoch: u64) -> Vec<Vec<usize>> {
    assert!(batch_size > 0, "batch size must be positive");
    permutation(n, seed, epoch)
        .chunks(batch_size)
        .map(<[usize]>::to_vec)
        .collect()
}

pub fn batches(
    batch: &SampleBatch,
    batch_size: usize,
    seed: u64,
    epoch: u64,
) -> impl Iterator<Item = SampleBatch> + '_ {
    batch_indices(batch.n(), batch_size, seed, epoch)
        .into_iter()
        .map(move |idx| batch.select(&idx))
}

/// Per-column affine standardization fitted on one split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    /// `(column, mean, std)` for every standardized column.
    pub columns: Vec<(usize, f64, f64)>,
}

impl Standardizer {
    /// Fits mean and population standard deviation of `columns`. Constant
    /// columns are only centered.
    pub fn fit(features: &Tensor, columns: &[usize]) -> Result<Self> {
        let n = features.rows();
        if n == 0 {
            return Err(Error::InvalidBatch(
                "cannot fit a standardizer on zero rows".into(),
            ));
        }
        let mut fitted = Vec::with_capacity(columns.len());
        for &c in columns {
            if c >= features.cols() {
                return Err(Error::InvalidConfig(format!("column {c} is out of range")));
            }
            let mean = (0..n).map(|i| features.row(i)[c]).sum::<f64>() / n as f64;
            let var = (0..n)
                .map(|i| (features.row(i)[c] - mean).powi(2))
                .sum::<f64>()
                / n as f64;
            let std = if var > 0.0 { var.sqrt() } else { 1.0 };
            fitted.push((c, mean, std));
        }
        Ok(Self { columns: fitted })
    }

    pub fn transform(&self, features: &Tensor) -> Tensor {
        let mut out = features.clone();
        let cols = out.cols();
        for row in out.data_mut().chunks_mut(cols) {
            for &(c, mean, std) in &self.columns {
                row[c] = (row[c] - mean) / std;
            }
        }
        out
    }

    pub fn apply(&self, batch: SampleBatch) -> Result<SampleBatch> {
        let features = self.transform(batch.features());
        batch.with_features(features)
    }
}
