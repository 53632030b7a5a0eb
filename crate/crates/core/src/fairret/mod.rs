//! Fairness regularization terms.
//!
//! A [`Fairret`] turns the group statistics of a score vector into a scalar,
//! differentiable penalty that is zero exactly when the scores are fair.

pub mod projection;
pub mod violation;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::autodiff::{Tape, Tensor, Var};
use crate::statistics::{violation_on, Statistic};
use crate::{Error, Result, SampleBatch};

pub use projection::{
    divergence, projection_fairret_on, solve_projection, solve_projection_system, DivergenceKind,
    ProjectionResult, ProjectionSolverConfig,
};
pub use violation::{norm_fairret, smoothmax_fairret, NormOrder};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Fairret {
    Norm(NormOrder),
    SmoothMax,
    Projection(DivergenceKind),
}

impl Fairret {
    pub const ALL: [Fairret; 7] = [
        Fairret::Norm(NormOrder::L1),
        Fairret::Norm(NormOrder::L2),
        Fairret::Norm(NormOrder::Inf),
        Fairret::SmoothMax,
        Fairret::Projection(DivergenceKind::Kl),
        Fairret::Projection(DivergenceKind::Js),
        Fairret::Projection(DivergenceKind::Sed),
    ];

    pub fn name(self) -> &'static str {
        match self {
            Fairret::Norm(NormOrder::L1) => "norm1",
            Fairret::Norm(NormOrder::L2) => "norm2",
            Fairret::Norm(NormOrder::Inf) => "norm_inf",
            Fairret::SmoothMax => "smoothmax",
            Fairret::Projection(kind) => kind.name(),
        }
    }

    pub fn is_projection(self) -> bool {
        matches!(self, Fairret::Projection(_))
    }
}

impl fmt::Display for Fairret {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Fairret {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key = s.trim().to_ascii_lowercase().replace('-', "_");
        Ok(match key.as_str() {
            "norm1" | "norm_1" | "l1" => Fairret::Norm(NormOrder::L1),
            "norm2" | "norm_2" | "l2" | "norm" => Fairret::Norm(NormOrder::L2),
            "norm_inf" | "norminf" | "linf" => Fairret::Norm(NormOrder::Inf),
            "smoothmax" | "smooth_max" => Fairret::SmoothMax,
            "kl" | "projection_kl" => Fairret::Projection(DivergenceKind::Kl),
            "js" | "projection_js" => Fairret::Projection(DivergenceKind::Js),
            "sed" | "projection_sed" => Fairret::Projection(DivergenceKind::Sed),
            _ => return Err(Error::UnknownFairret(s.to_string())),
        })
    }
}

impl Serialize for Fairret {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        serializer.serialize_str(self.name())
    }
}

impl<'de> Deserialize<'de> for Fairret {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// State carried between successive evaluations within one training run.
#[derive(Debug, Clone, Default)]
pub struct FairretState {
    duals: Option<Vec<f64>>,
    /// Projection solves that hit the iteration cap.
    pub capped_solves: usize,
    pub solves: usize,
}

impl FairretState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn duals(&self) -> Option<&[f64]> {
        self.duals.as_deref()
    }
}

#[derive(Debug, Clone)]
pub struct FairretOutput {
    /// Scalar loss node.
    pub loss: Var,
    /// Projection solve, for projection fairrets.
    pub projection: Option<ProjectionResult>,
    /// The overall statistic was zero and the violation fell back to raw
    /// group statistics.
    pub fallback_used: bool,
}

/// Records the fairret of the scores `h` on the tape.
pub fn fairret_on(
    tape: &mut Tape,
    fairret: Fairret,
    stat: &Statistic,
    batch: &SampleBatch,
    h: Var,
    solver: &ProjectionSolverConfig,
    state: &mut FairretState,
) -> Result<FairretOutput> {
    match fairret {
        Fairret::Norm(order) => {
            let v = violation_on(tape, stat, batch, h)?;
            Ok(FairretOutput {
                loss: norm_fairret(tape, v.values, order)?,
                projection: None,
                fallback_used: v.fallback_used,
            })
        }
        Fairret::SmoothMax => {
            let v = violation_on(tape, stat, batch, h)?;
            Ok(FairretOutput {
                loss: smoothmax_fairret(tape, v.values)?,
                projection: None,
                fallback_used: v.fallback_used,
            })
        }
        Fairret::Projection(kind) => {
            let scores = tape.value(h).data().to_vec();
            let warm = if solver.warm_start {
                state.duals()
            } else {
                None
            };
            let result = solve_projection(kind, stat, batch, &scores, solver, warm)?;
            state.solves += 1;
            if !result.converged {
                state.capped_solves += 1;
            }
            state.duals = Some(result.duals.clone());
            let loss = projection_fairret_on(tape, kind, &result.f_star, h)?;
            Ok(FairretOutput {
                loss,
                projection: Some(result),
                fallback_used: false,
            })
        }
    }
}

/// Value of the fairret for fixed scores.
pub fn fairret_value(
    fairret: Fairret,
    stat: &Statistic,
    batch: &SampleBatch,
    h: &[f64],
    solver: &ProjectionSolverConfig,
) -> Result<f64> {
    let mut tape = Tape::new();
    let hv = tape.constant(Tensor::vector(h.to_vec()));
    let out = fairret_on(
        &mut tape,
        fairret,
        stat,
        batch,
        hv,
        solver,
        &mut FairretState::new(),
    )?;
    Ok(tape.value(out.loss).data()[0])
}
