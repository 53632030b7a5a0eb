use super::{Tape, Tensor, Var};
use crate::Error;

/// Settings for comparing tape gradients against central differences.
#[derive(Debug, Clone, Copy)]
pub struct GradCheck {
    pub step: f64,
    pub tolerance: f64,
    /// Lower bound on the denominator of the relative error, so that
    /// near-zero gradients are compared absolutely.
    pub floor: f64,
}

impl Default for GradCheck {
    fn default() -> Self {
        Self {
            step: 1e-5,
            tolerance: 1e-4,
            floor: 1e-6,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
    /// Largest relative error over the coordinates that were compared.
    pub max_relative_error: f64,
    /// Coordinates where one-sided differences disagree, i.e. the function
    /// has a kink within one step of the point. These are not compared.
    pub non_smooth: Vec<usize>,
    pub passed: bool,
}

/// Checks the tape gradient of a scalar function at `point` against central
/// finite differences.
///
/// `f` receives a fresh tape and the leaf holding the (perturbed) point and
/// must return a scalar node.
pub fn finite_difference_check<F>(
    f: F,
    point: &Tensor,
    cfg: &GradCheck,
) -> Result<GradCheckReport, Error>
where
    F: Fn(&mut Tape, Var) -> Result<Var, Error>,
{
    assert!(cfg.step > 0.0, "finite difference step must be positive");
    let eval = |p: Tensor| -> Result<f64, Error> {
        let mut tape = Tape::new();
        let x = tape.leaf(p);
        let y = f(&mut tape, x)?;
        Ok(tape.value(y).data()[0])
    };

    let mut tape = Tape::new();
    let x = tape.leaf(point.clone());
    let y = f(&mut tape, x)?;
    let f0 = tape.value(y).data()[0];
    let analytic = tape.backward(y)?.wrt(x).to_vec();

    let mut numeric = Vec::with_capacity(point.numel());
    let mut non_smooth = Vec::new();
    let mut max_relative_error: f64 = 0.0;
    for i in 0..point.numel() {
        let mut plus = point.clone();
        plus.data_mut()[i] += cfg.step;
        let mut minus = point.clone();
        minus.data_mut()[i] -= cfg.step;
        let (fp, fm) = (eval(plus)?, eval(minus)?);
        let central = (fp - fm) / (2.0 * cfg.step);
        numeric.push(central);

        let forward = (fp - f0) / cfg.step;
        let backward = (f0 - fm) / cfg.step;
        let scale = forward.abs().max(backward.abs()).max(1.0);
        if (forward - backward).abs() > 1e-2 * scale {
            non_smooth.push(i);
            continue;
        }
        let a = analytic[i];
        let denom = a.abs().max(central.abs()).max(cfg.floor);
        max_relative_error = max_relative_error.max((a - central).abs() / denom);
    }
    Ok(GradCheckReport {
        passed: max_relative_error <= cfg.tolerance,
        analytic,
        numeric,
        max_relative_error,
        non_smooth,
    })
}
