//! Linear-fractional group statistics.
//!
//! A statistic is defined by four per-sample coefficient vectors that depend
//! only on features and labels. For a score vector `h` and sensitive column
//! `S_k` the group statistic is
//!
//! ```text
//! gamma_k(h) = sum_i S_ik (a0_i + h_i b0_i) / sum_i S_ik (a1_i + h_i b1_i)
//! ```
//!
//! and the overall statistic is the same ratio without the `S_ik` weights.
//! Fixing the target value `c` turns `gamma_k(h) = c` into a constraint that
//! is linear in `h` (see [`fixed_constraints`]).

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::{Error, Result, SampleBatch};

/// Denominators (and overall statistics) with magnitude below this value are
/// treated as exactly zero.
pub const DEGENERACY_THRESHOLD: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StatisticKind {
    #[serde(alias = "dp")]
    DemographicParity,
    #[serde(alias = "cdp")]
    ConditionalDemographicParity,
    #[serde(alias = "eo")]
    EqualOpportunity,
    #[serde(alias = "fpp")]
    FalsePositiveParity,
    #[serde(alias = "pp")]
    PredictiveParity,
    #[serde(alias = "fop")]
    FalseOmissionParity,
    #[serde(alias = "ae")]
    AccuracyEquality,
    #[serde(alias = "te")]
    TreatmentEquality,
}

impl StatisticKind {
    pub const ALL: [StatisticKind; 8] = [
        StatisticKind::DemographicParity,
        StatisticKind::ConditionalDemographicParity,
        StatisticKind::EqualOpportunity,
        StatisticKind::FalsePositiveParity,
        StatisticKind::PredictiveParity,
        StatisticKind::FalseOmissionParity,
        StatisticKind::AccuracyEquality,
        StatisticKind::TreatmentEquality,
    ];

    pub fn name(self) -> &'static str {
        match self {
            StatisticKind::DemographicParity => "demographic_parity",
            StatisticKind::ConditionalDemographicParity => "conditional_demographic_parity",
            StatisticKind::EqualOpportunity => "equal_opportunity",
            StatisticKind::FalsePositiveParity => "false_positive_parity",
            StatisticKind::PredictiveParity => "predictive_parity",
            StatisticKind::FalseOmissionParity => "false_omission_parity",
            StatisticKind::AccuracyEquality => "accuracy_equality",
            StatisticKind::TreatmentEquality => "treatment_equality",
        }
    }

    pub fn short_name(self) -> &'static str {
        match self {
            StatisticKind::DemographicParity => "dp",
            StatisticKind::ConditionalDemographicParity => "cdp",
            StatisticKind::EqualOpportunity => "eo",
            StatisticKind::FalsePositiveParity => "fpp",
            StatisticKind::PredictiveParity => "pp",
            StatisticKind::FalseOmissionParity => "fop",
            StatisticKind::AccuracyEquality => "ae",
            StatisticKind::TreatmentEquality => "te",
        }
    }
}

impl fmt::Display for StatisticKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for StatisticKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim().to_ascii_lowercase();
        StatisticKind::ALL
            .into_iter()
            .find(|k| k.name() == s || k.short_name() == s)
            .ok_or(Error::UnknownStatistic(s))
    }
}

/// Where the conditioning function of conditional demographic parity comes
/// from. Real-valued weights are allowed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConditionSource {
    /// Use [`SampleBatch::condition_weights`].
    BatchWeights,
    /// Use a column of the feature matrix.
    FeatureColumn(usize),
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StatisticOptions {
    pub condition: Option<ConditionSource>,
}

/// Per-sample coefficient vectors of a linear-fractional statistic.
#[derive(Debug, Clone, PartialEq)]
pub struct Coefficients {
    /// Numerator offset.
    pub a0: Vec<f64>,
    /// Denominator offset.
    pub a1: Vec<f64>,
    /// Numerator slope in the score.
    pub b0: Vec<f64>,
    /// Denominator slope in the score.
    pub b1: Vec<f64>,
}

/// A linear-fractional statistic definition.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Statistic {
    kind: StatisticKind,
    condition: Option<ConditionSource>,
}

/// Looks up a statistic by its stable name (or short alias such as `dp`).
pub fn make_statistic(name: &str, options: &StatisticOptions) -> Result<Statistic> {
    let kind: StatisticKind = name.parse()?;
    Statistic::with_options(kind, options)
}

impl Statistic {
    /// Statistic without conditioning options. Fails for conditional
    /// demographic parity, which needs a [`ConditionSource`].
    pub fn new(kind: StatisticKind) -> Result<Self> {
        Self::with_options(kind, &StatisticOptions::default())
    }

    pub fn with_options(kind: StatisticKind, options: &StatisticOptions) -> Result<Self> {
        let condition = match kind {
            StatisticKind::ConditionalDemographicParity => Some(
                options
                    .condition
                    .ok_or_else(|| Error::MissingConditionWeights(kind.name().into()))?,
            ),
            _ => None,
        };
        Ok(Self { kind, condition })
    }

    pub fn kind(&self) -> StatisticKind {
        self.kind
    }

    pub fn name(&self) -> &'static str {
        self.kind.name()
    }

    /// Whether the denominator does not depend on the score.
    pub fn is_linear(&self) -> bool {
        !matches!(
            self.kind,
            StatisticKind::PredictiveParity
                | StatisticKind::FalseOmissionParity
                | StatisticKind::TreatmentEquality
        )
    }

    /// Evaluates the coefficient vectors. The signature deliberately has no
    /// access to sensitive values or scores.
    pub fn coefficients(
        &self,
        features: &Tensor,
        labels: &[f64],
        condition_weights: Option<&[f64]>,
    ) -> Result<Coefficients> {
        let n = labels.len();
        let ones = vec![1.0; n];
        let zeros = vec![0.0; n];
        let y = labels.to_vec();
        let not_y: Vec<f64> = labels.iter().map(|y| 1.0 - y).collect();
        let neg_y: Vec<f64> = labels.iter().map(|y| -y).collect();
        // (a0, b0, a1, b1)
        let (a0, b0, a1, b1) = match self.kind {
            StatisticKind::DemographicParity => (zeros.clone(), ones.clone(), ones, zeros),
            StatisticKind::ConditionalDemographicParity => {
                let zeta = self.condition_values(features, condition_weights, n)?;
                (zeros.clone(), zeta.clone(), zeta, zeros)
            }
            StatisticKind::EqualOpportunity => (zeros.clone(), y.clone(), y, zeros),
            StatisticKind::FalsePositiveParity => (zeros.clone(), not_y.clone(), not_y, zeros),
            StatisticKind::PredictiveParity => (zeros.clone(), y, zeros, ones),
            StatisticKind::FalseOmissionParity => {
                (y, neg_y, ones, labels.iter().map(|_| -1.0).collect())
            }
            StatisticKind::AccuracyEquality => (
                not_y,
                labels.iter().map(|y| 2.0 * y - 1.0).collect(),
                ones,
                zeros,
            ),
            StatisticKind::TreatmentEquality => (y, neg_y, zeros, not_y),
        };
        Ok(Coefficients { a0, a1, b0, b1 })
    }

    pub fn coefficients_for(&self, batch: &SampleBatch) -> Result<Coefficients> {
        self.coefficients(batch.features(), batch.labels(), batch.condition_weights())
    }

    fn condition_values(
        &self,
        features: &Tensor,
        condition_weights: Option<&[f64]>,
        n: usize,
    ) -> Result<Vec<f64>> {
        let missing = || Error::MissingConditionWeights(self.name().into());
        match self.condition.ok_or_else(missing)? {
            ConditionSource::BatchWeights => {
                let w = condition_weights.ok_or_else(missing)?;
                Ok(w.to_vec())
            }
            ConditionSource::FeatureColumn(j) => {
                if j >= features.cols() || features.rows() != n {
                    return Err(Error::InvalidConfig(format!(
                        "condition column {j} is out of range for features {:?}",
                        features.shape()
                    )));
                }
                Ok((0..n).map(|i| features.row(i)[j]).collect())
            }
        }
    }
}

impl fmt::Display for Statistic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Group and overall statistics as tape nodes.
#[derive(Debug, Clone, Copy)]
pub struct StatisticVars {
    /// `[d_s]` vector of group statistics.
    pub per_group: Var,
    /// Scalar overall statistic.
    pub overall: Var,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroupStatistics {
    pub per_group: Vec<f64>,
    pub overall: f64,
}

fn check_scores(batch: &SampleBatch, h: &[f64]) -> Result<()> {
    if h.len() != batch.n() {
        return Err(Error::InvalidBatch(format!(
            "{} scores for {} samples",
            h.len(),
            batch.n()
        )));
    }
    if h.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidBatch("non-finite score".into()));
    }
    Ok(())
}

/// Records the group statistics of `h` on the tape.
pub fn group_statistics_on(
    tape: &mut Tape,
    stat: &Statistic,
    batch: &SampleBatch,
    h: Var,
) -> Result<StatisticVars> {
    check_scores(batch, tape.value(h).data())?;
    let coeffs = stat.coefficients_for(batch)?;
    let n = batch.n() as f64;

    let affine = |tape: &mut Tape, offset: Vec<f64>, slope: Vec<f64>| -> Result<Var> {
        let offset = tape.constant(Tensor::vector(offset));
        if slope.iter().all(|&b| b == 0.0) {
            return Ok(offset);
        }
        let slope = tape.constant(Tensor::vector(slope));
        let scaled = tape.mul(h, slope)?;
        Ok(tape.add(offset, scaled)?)
    };
    let numerator = affine(tape, coeffs.a0, coeffs.b0)?;
    let denominator = affine(tape, coeffs.a1, coeffs.b1)?;

    let st = tape.constant(batch.sensitive().transpose()?);
    let group_num = tape.matmul(st, numerator)?;
    let group_num = tape.mul_scalar(group_num, 1.0 / n)?;
    let group_den = tape.matmul(st, denominator)?;
    let group_den = tape.mul_scalar(group_den, 1.0 / n)?;
    for (group, &d) in tape.value(group_den).data().iter().enumerate() {
        if d.abs() < DEGENERACY_THRESHOLD {
            return Err(Error::DegenerateGroup {
                group,
                denominator: d,
            });
        }
    }
    let per_group = tape.div(group_num, group_den)?;

    let overall_num = tape.mean(numerator)?;
    let overall_den = tape.mean(denominator)?;
    let d = tape.value(overall_den).data()[0];
    if d.abs() < DEGENERACY_THRESHOLD {
        return Err(Error::DegenerateOverall { denominator: d });
    }
    let overall = tape.div(overall_num, overall_den)?;
    Ok(StatisticVars { per_group, overall })
}

/// Group and overall statistics of a fixed score vector.
pub fn group_statistics(
    stat: &Statistic,
    batch: &SampleBatch,
    h: &[f64],
) -> Result<GroupStatistics> {
    let mut tape = Tape::new();
    let hv = tape.constant(Tensor::vector(h.to_vec()));
    let vars = group_statistics_on(&mut tape, stat, batch, hv)?;
    Ok(GroupStatistics {
        per_group: tape.value(vars.per_group).data().to_vec(),
        overall: tape.value(vars.overall).data()[0],
    })
}

/// Violation vector as a tape node.
#[derive(Debug, Clone, Copy)]
pub struct ViolationVars {
    /// `[d_s]` vector of non-negative violations.
    pub values: Var,
    /// The overall statistic was zero, so raw group statistics were used.
    pub fallback_used: bool,
    pub statistics: StatisticVars,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ViolationVector {
    pub values: Vec<f64>,
    pub fallback_used: bool,
}

impl ViolationVector {
    /// Largest entry, the reported fairness violation.
    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(0.0, f64::max)
    }
}

/// Records `v_k = |gamma_k / gamma_overall - 1|` on the tape, falling back to
/// `|gamma_k|` when the overall statistic is zero.
pub fn violation_on(
    tape: &mut Tape,
    stat: &Statistic,
    batch: &SampleBatch,
    h: Var,
) -> Result<ViolationVars> {
    let statistics = group_statistics_on(tape, stat, batch, h)?;
    let overall = tape.value(statistics.overall).data()[0];
    if overall.abs() < DEGENERACY_THRESHOLD {
        let values = tape.abs(statistics.per_group)?;
        return Ok(ViolationVars {
            values,
            fallback_used: true,
            statistics,
        });
    }
    let ratio = tape.div(statistics.per_group, statistics.overall)?;
    let shifted = tape.add_scalar(ratio, -1.0)?;
    let values = tape.abs(shifted)?;
    Ok(ViolationVars {
        values,
        fallback_used: false,
        statistics,
    })
}

pub fn violation(stat: &Statistic, batch: &SampleBatch, h: &[f64]) -> Result<ViolationVector> {
    let mut tape = Tape::new();
    let hv = tape.constant(Tensor::vector(h.to_vec()));
    let v = violation_on(&mut tape, stat, batch, hv)?;
    Ok(ViolationVector {
        values: tape.value(v.values).data().to_vec(),
        fallback_used: v.fallback_used,
    })
}

/// Constraints `gamma_k(f) = c` rewritten as
/// `(1/n) sum_i S_ik (alpha_i + f_i beta_i) = 0`.
#[derive(Debug, Clone)]
pub struct LinearConstraintSystem {
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
    pub c: f64,
    /// Non-zero sensitive entries per group, as `(sample, value)`.
    pub members: Vec<Vec<(usize, f64)>>,
    /// Non-zero sensitive entries per sample, as `(group, value)`.
    pub memberships: Vec<Vec<(usize, f64)>>,
}

impl LinearConstraintSystem {
    pub fn n(&self) -> usize {
        self.alpha.len()
    }

    pub fn d_s(&self) -> usize {
        self.members.len()
    }

    /// Residual of each group constraint at the score vector `f`.
    pub fn residual(&self, f: &[f64]) -> Vec<f64> {
        let n = self.n() as f64;
        self.members
            .iter()
            .map(|group| {
                group
                    .iter()
                    .map(|&(i, s)| s * (self.alpha[i] + f[i] * self.beta[i]))
                    .sum::<f64>()
                    / n
            })
            .collect()
    }
}

/// Builds the linear constraint system of the `c`-fixed fairness notion.
pub fn fixed_constraints(
    stat: &Statistic,
    batch: &SampleBatch,
    c: f64,
) -> Result<LinearConstraintSystem> {
    if !c.is_finite() {
        return Err(Error::InvalidConfig(format!(
            "fixed statistic value {c} is not finite"
        )));
    }
    let coeffs = stat.coefficients_for(batch)?;
    let alpha = coeffs
        .a0
        .iter()
        .zip(&coeffs.a1)
        .map(|(a0, a1)| a0 - c * a1)
        .collect();
    let beta = coeffs
        .b0
        .iter()
        .zip(&coeffs.b1)
        .map(|(b0, b1)| b0 - c * b1)
        .collect();
    let members = batch.group_members();
    let mut memberships = vec![Vec::new(); batch.n()];
    for (k, group) in members.iter().enumerate() {
        for &(i, s) in group {
            memberships[i].push((k, s));
        }
    }
    Ok(LinearConstraintSystem {
        alpha,
        beta,
        c,
        members,
        memberships,
    })
}
