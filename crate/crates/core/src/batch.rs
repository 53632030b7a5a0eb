use crate::autodiff::Tensor;
use crate::{Error, Result};

/// Features, binary labels and sensitive values for `n` individuals.
///
/// Sensitive values are real-valued. Rows are one-hot in the partition
/// setting, may contain several one-hot blocks when multiple axes are
/// combined, and may hold raw continuous values.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleBatch {
    features: Tensor,
    labels: Vec<f64>,
    sensitive: Tensor,
    condition_weights: Option<Vec<f64>>,
}

impl SampleBatch {
    pub fn new(features: Tensor, labels: Vec<f64>, sensitive: Tensor) -> Result<Self> {
        let n = labels.len();
        if n == 0 {
            return Err(Error::InvalidBatch("batch is empty".into()));
        }
        if features.rank() != 2 || features.rows() != n {
            return Err(Error::InvalidBatch(format!(
                "features of shape {:?} do not match {n} labels",
                features.shape()
            )));
        }
        if sensitive.rank() != 2 || sensitive.rows() != n {
            return Err(Error::InvalidBatch(format!(
                "sensitive matrix of shape {:?} does not match {n} labels",
                sensitive.shape()
            )));
        }
        if let Some(bad) = labels.iter().find(|&&y| y != 0.0 && y != 1.0) {
            return Err(Error::InvalidBatch(format!("label {bad} is not binary")));
        }
        if !features.is_finite() || !sensitive.is_finite() {
            return Err(Error::InvalidBatch(
                "non-finite feature or sensitive value".into(),
            ));
        }
        Ok(Self {
            features,
            labels,
            sensitive,
            condition_weights: None,
        })
    }

    /// Attaches per-sample weights used by conditional statistics.
    pub fn with_condition_weights(mut self, weights: Vec<f64>) -> Result<Self> {
        if weights.len() != self.n() {
            return Err(Error::InvalidBatch(format!(
                "{} condition weights for {} samples",
                weights.len(),
                self.n()
            )));
        }
        if weights.iter().any(|w| !w.is_finite()) {
            return Err(Error::InvalidBatch("non-finite condition weight".into()));
        }
        self.condition_weights = Some(weights);
        Ok(self)
    }

    pub fn n(&self) -> usize {
        self.labels.len()
    }

    pub fn d_x(&self) -> usize {
        self.features.cols()
    }

    pub fn d_s(&self) -> usize {
        self.sensitive.cols()
    }

    pub fn features(&self) -> &Tensor {
        &self.features
    }

    pub fn labels(&self) -> &[f64] {
        &self.labels
    }

    pub fn sensitive(&self) -> &Tensor {
        &self.sensitive
    }

    pub fn condition_weights(&self) -> Option<&[f64]> {
        self.condition_weights.as_deref()
    }

    /// Whether every sensitive row is a one-hot vector.
    pub fn is_partition(&self) -> bool {
        (0..self.n()).all(|i| {
            let row = self.sensitive.row(i);
            row.iter().all(|&s| s == 0.0 || s == 1.0) && row.iter().sum::<f64>() == 1.0
        })
    }

    pub fn require_partition(&self) -> Result<()> {
        if self.is_partition() {
            Ok(())
        } else {
            Err(Error::InvalidBatch(
                "sensitive rows are not one-hot encoded".into(),
            ))
        }
    }

    /// Rows at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> Self {
        let gather = |t: &Tensor| {
            let mut data = Vec::with_capacity(indices.len() * t.cols());
            for &i in indices {
                data.extend_from_slice(t.row(i));
            }
            Tensor::matrix(indices.len(), t.cols(), data).expect("row gather preserves width")
        };
        Self {
            features: gather(&self.features),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            sensitive: gather(&self.sensitive),
            condition_weights: self
                .condition_weights
                .as_ref()
                .map(|w| indices.iter().map(|&i| w[i]).collect()),
        }
    }

    /// Replaces the feature matrix, e.g. after standardization.
    pub fn with_features(mut self, features: Tensor) -> Result<Self> {
        if features.rank() != 2 || features.rows() != self.n() {
            return Err(Error::InvalidBatch(format!(
                "replacement features of shape {:?} do not match {} samples",
                features.shape(),
                self.n()
            )));
        }
        self.features = features;
        Ok(self)
    }

    /// Non-zero sensitive entries of each group (column), as `(sample, value)`.
    pub fn group_members(&self) -> Vec<Vec<(usize, f64)>> {
        let mut members = vec![Vec::new(); self.d_s()];
        for i in 0..self.n() {
            for (k, &s) in self.sensitive.row(i).iter().enumerate() {
                if s != 0.0 {
                    members[k].push((i, s));
                }
            }
        }
        members
    }
}
