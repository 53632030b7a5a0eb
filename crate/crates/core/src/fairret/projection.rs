//! Projection fairrets.
//!
//! The score vector `h` is projected onto the set of score vectors whose group
//! statistics all equal `c = overall(h)`. The projection minimizes the mean
//! per-sample divergence `D(f_i || h_i)` under the linear constraints produced
//! by [`fixed_constraints`]. The fairret is the mean divergence between the
//! projection, held fixed, and `h`.
//!
//! The projection is solved in the dual. With one multiplier per group and
//! `u_i = beta_i * sum_k lambda_k S_ik`, every sample's primal response solves
//! `D'(f_i) + u_i = 0`, which has a closed form for KL and SED and is a
//! monotone scalar root for JS. The multipliers follow damped Newton ascent
//! with backtracking on the concave dual.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::{AutodiffError, Tape, Tensor, Var};
use crate::statistics::{fixed_constraints, group_statistics, LinearConstraintSystem, Statistic};
use crate::{Error, Result, SampleBatch};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DivergenceKind {
    /// Binary Kullback-Leibler divergence.
    Kl,
    /// Binary Jensen-Shannon divergence.
    Js,
    /// Squared Euclidean distance between the two Bernoulli parameter vectors.
    Sed,
}

impl DivergenceKind {
    pub fn name(self) -> &'static str {
        match self {
            DivergenceKind::Kl => "kl",
            DivergenceKind::Js => "js",
            DivergenceKind::Sed => "sed",
        }
    }
}

impl fmt::Display for DivergenceKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for DivergenceKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "kl" => Ok(DivergenceKind::Kl),
            "js" => Ok(DivergenceKind::Js),
            "sed" => Ok(DivergenceKind::Sed),
            other => Err(Error::InvalidConfig(format!(
                "unknown divergence `{other}`"
            ))),
        }
    }
}

/// `x log(x / y)` with `0 log 0 = 0`.
fn xlog_ratio(x: f64, y: f64) -> f64 {
    if x == 0.0 {
        0.0
    } else {
        x * (x / y).ln()
    }
}

fn kl(f: f64, h: f64) -> f64 {
    xlog_ratio(f, h) + xlog_ratio(1.0 - f, 1.0 - h)
}

fn js(f: f64, h: f64) -> f64 {
    let m = 0.5 * (f + h);
    0.5 * kl(f, m) + 0.5 * kl(h, m)
}

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Divergence of projected score `f` from model score `h`.
pub fn divergence(kind: DivergenceKind, f: f64, h: f64) -> Result<f64> {
    if !(h > 0.0 && h < 1.0) {
        return Err(AutodiffError::Domain {
            op: "divergence",
            detail: format!("model score {h} is not in (0, 1)"),
        }
        .into());
    }
    if !(0.0..=1.0).contains(&f) {
        return Err(AutodiffError::Domain {
            op: "divergence",
            detail: format!("projected score {f} is not in [0, 1]"),
        }
        .into());
    }
    Ok(match kind {
        DivergenceKind::Kl => kl(f, h),
        DivergenceKind::Js => js(f, h),
        DivergenceKind::Sed => 2.0 * (f - h) * (f - h),
    })
}

/// Bracket used by the JS stationarity solve.
const JS_LOWER: f64 = 1e-12;
const JS_UPPER: f64 = 1.0 - 1e-12;
const JS_WIDTH: f64 = 1e-12;

/// Minimizer of `D(f || h) + u f` over the admissible range, together with
/// `-df/du` (zero when the minimizer sits on a bound).
fn respond(kind: DivergenceKind, h: f64, u: f64) -> (f64, f64) {
    match kind {
        DivergenceKind::Kl => {
            let f = sigmoid(logit(h) - u);
            (f, f * (1.0 - f))
        }
        DivergenceKind::Sed => {
            let f = h - 0.25 * u;
            if f <= 0.0 {
                (0.0, 0.0)
            } else if f >= 1.0 {
                (1.0, 0.0)
            } else {
                (f, 0.25)
            }
        }
        DivergenceKind::Js => {
            // 0.5 (logit f - logit m) + u is increasing in f.
            let stationarity = |f: f64| 0.5 * (logit(f) - logit(0.5 * (f + h))) + u;
            if stationarity(JS_LOWER) >= 0.0 {
                return (JS_LOWER, 0.0);
            }
            if stationarity(JS_UPPER) <= 0.0 {
                return (JS_UPPER, 0.0);
            }
            let (mut lo, mut hi) = (JS_LOWER, JS_UPPER);
            while hi - lo > JS_WIDTH {
                let mid = 0.5 * (lo + hi);
                if stationarity(mid) < 0.0 {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            let f = 0.5 * (lo + hi);
            let m = 0.5 * (f + h);
            let curvature = 0.5 * (1.0 / (f * (1.0 - f)) - 0.5 / (m * (1.0 - m)));
            (f, 1.0 / curvature)
        }
    }
}

fn raw_divergence(kind: DivergenceKind, f: f64, h: f64) -> f64 {
    match kind {
        DivergenceKind::Kl => kl(f, h),
        DivergenceKind::Js => js(f, h),
        DivergenceKind::Sed => 2.0 * (f - h) * (f - h),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProjectionSolverConfig {
    /// Cap on accepted Newton steps.
    pub max_iterations: usize,
    /// Stop once every constraint residual is at most this in magnitude.
    pub residual_tolerance: f64,
    /// Start from the multipliers of the previous solve when available.
    pub warm_start: bool,
    /// When the cap is hit before convergence, finish with coordinate-wise
    /// dual solves so the returned projection is feasible.
    pub restore_feasibility: bool,
}

impl Default for ProjectionSolverConfig {
    fn default() -> Self {
        Self {
            max_iterations: 10,
            residual_tolerance: 1e-6,
            warm_start: true,
            restore_feasibility: true,
        }
    }
}

impl ProjectionSolverConfig {
    /// Effectively uncapped solve without warm starts.
    pub fn full_convergence() -> Self {
        Self {
            max_iterations: 200,
            residual_tolerance: 1e-6,
            warm_start: false,
            restore_feasibility: true,
        }
    }

    pub fn with_max_iterations(mut self, max_iterations: usize) -> Self {
        self.max_iterations = max_iterations;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_iterations == 0 {
            return Err(Error::InvalidConfig(
                "max_iterations must be at least 1".into(),
            ));
        }
        if !(self.residual_tolerance > 0.0) {
            return Err(Error::InvalidConfig(
                "residual_tolerance must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionResult {
    pub f_star: Vec<f64>,
    pub duals: Vec<f64>,
    pub residuals: Vec<f64>,
    /// Accepted Newton steps.
    pub iterations: usize,
    /// Residual tolerance reached within the iteration cap.
    pub converged: bool,
    /// Feasibility restoration ran after the cap was hit.
    pub restored: bool,
    /// Dual objective after every accepted step, starting with the initial point.
    pub dual_history: Vec<f64>,
    /// Mean divergence of `f_star` from `h`.
    pub objective: f64,
}

impl ProjectionResult {
    pub fn max_residual(&self) -> f64 {
        self.residuals.iter().fold(0.0, |m, r| m.max(r.abs()))
    }
}

struct DualPoint {
    duals: Vec<f64>,
    f: Vec<f64>,
    /// `-df_i/du_i`
    sensitivity: Vec<f64>,
    residuals: Vec<f64>,
    value: f64,
}

impl DualPoint {
    fn max_residual(&self) -> f64 {
        self.residuals.iter().fold(0.0, |m, r| m.max(r.abs()))
    }
}

struct DualProblem<'a> {
    kind: DivergenceKind,
    sys: &'a LinearConstraintSystem,
    h: &'a [f64],
    /// Groups whose constraint involves at least one sample.
    active: Vec<bool>,
    /// Diagonal of the dual curvature at `f = h`, used to regularize Newton.
    nominal: Vec<f64>,
}

impl<'a> DualProblem<'a> {
    fn new(kind: DivergenceKind, sys: &'a LinearConstraintSystem, h: &'a [f64]) -> Result<Self> {
        let n = sys.n() as f64;
        let mut active = vec![false; sys.d_s()];
        let mut nominal = vec![0.0; sys.d_s()];
        for (k, members) in sys.members.iter().enumerate() {
            if members.is_empty() {
                continue;
            }
            if members.iter().all(|&(i, _)| sys.beta[i].abs() < 1e-12) {
                return Err(Error::Infeasible { group: k });
            }
            active[k] = true;
            nominal[k] = members
                .iter()
                .map(|&(i, s)| respond(kind, h[i], 0.0).1.max(1e-12) * (sys.beta[i] * s).powi(2))
                .sum::<f64>()
                / n;
        }
        Ok(Self {
            kind,
            sys,
            h,
            active,
            nominal,
        })
    }

    fn shift(&self, duals: &[f64], i: usize) -> f64 {
        let t: f64 = self.sys.memberships[i]
            .iter()
            .map(|&(k, s)| duals[k] * s)
            .sum();
        self.sys.beta[i] * t
    }

    fn evaluate(&self, duals: Vec<f64>) -> DualPoint {
        let sys = self.sys;
        let n = sys.n();
        let mut f = Vec::with_capacity(n);
        let mut sensitivity = Vec::with_capacity(n);
        let mut lagrangian = 0.0;
        for i in 0..n {
            let (fi, wi) = respond(self.kind, self.h[i], self.shift(&duals, i));
            let t: f64 = sys.memberships[i].iter().map(|&(k, s)| duals[k] * s).sum();
            lagrangian +=
                raw_divergence(self.kind, fi, self.h[i]) + t * (sys.alpha[i] + sys.beta[i] * fi);
            f.push(fi);
            sensitivity.push(wi);
        }
        let residuals = sys.residual(&f);
        DualPoint {
            duals,
            f,
            sensitivity,
            residuals,
            value: lagrangian / n as f64,
        }
    }

    /// Negative dual Hessian, `(1/n) sum_i w_i beta_i^2 s_i s_i^T`, plus
    /// `ridge` times the nominal curvature.
    fn curvature(&self, point: &DualPoint, ridge: f64) -> Vec<Vec<f64>> {
        let d = self.sys.d_s();
        let n = self.sys.n() as f64;
        let mut m = vec![vec![0.0; d]; d];
        for (i, row) in self.sys.memberships.iter().enumerate() {
            let w = point.sensitivity[i] * self.sys.beta[i].powi(2) / n;
            if w == 0.0 {
                continue;
            }
            for &(k, sk) in row {
                for &(l, sl) in row {
                    m[k][l] += w * sk * sl;
                }
            }
        }
        for k in 0..d {
            m[k][k] += if self.active[k] {
                ridge * self.nominal[k]
            } else {
                1.0
            };
        }
        m
    }

    /// Residual of group `k` and its derivative in `lambda_k` (non-positive).
    fn group_residual(&self, duals: &[f64], k: usize) -> (f64, f64) {
        let sys = self.sys;
        let n = sys.n() as f64;
        let (mut r, mut dr) = (0.0, 0.0);
        for &(i, s) in &sys.members[k] {
            let (fi, wi) = respond(self.kind, self.h[i], self.shift(duals, i));
            r += s * (sys.alpha[i] + sys.beta[i] * fi);
            dr -= wi * (sys.beta[i] * s).powi(2);
        }
        (r / n, dr / n)
    }

    /// Solves `r_k(lambda_k) = 0` with the other multipliers fixed.
    fn solve_coordinate(&self, duals: &mut [f64], k: usize, tol: f64) {
        let (r0, _) = self.group_residual(duals, k);
        if r0.abs() <= tol {
            return;
        }
        // r_k is non-increasing in lambda_k: move up when positive.
        let direction = r0.signum();
        let start = duals[k];
        let mut step = r0.abs() / self.nominal[k].max(1e-12);
        let (mut inside, mut outside) = (start, f64::NAN);
        for _ in 0..200 {
            duals[k] = start + direction * step;
            let (r, _) = self.group_residual(duals, k);
            if r.abs() <= tol {
                return;
            }
            if r.signum() == direction {
                inside = duals[k];
                step *= 2.0;
            } else {
                outside = duals[k];
                break;
            }
        }
        if outside.is_nan() {
            duals[k] = inside;
            return;
        }
        // Safeguarded Newton inside the bracket.
        let (mut a, mut b) = (inside, outside);
        let mut x = 0.5 * (a + b);
        for _ in 0..200 {
            duals[k] = x;
            let (r, dr) = self.group_residual(duals, k);
            if r.abs() <= tol {
                return;
            }
            if r.signum() == direction {
                a = x;
            } else {
                b = x;
            }
            let newton = if dr < 0.0 { x - r / dr } else { f64::NAN };
            let (lo, hi) = (a.min(b), a.max(b));
            x = if newton > lo && newton < hi {
                newton
            } else {
                0.5 * (a + b)
            };
            if (b - a).abs() <= 1e-15 * (1.0 + x.abs()) {
                duals[k] = x;
                return;
            }
        }
    }
}

/// Solves for `x` in `m x = b` with a Cholesky factorization.
fn solve_spd(mut m: Vec<Vec<f64>>, b: &[f64]) -> Option<Vec<f64>> {
    let d = b.len();
    for j in 0..d {
        let mut diag = m[j][j];
        for p in 0..j {
            diag -= m[j][p] * m[j][p];
        }
        if !(diag > 0.0) {
            return None;
        }
        let diag = diag.sqrt();
        m[j][j] = diag;
        for i in j + 1..d {
            let mut v = m[i][j];
            for p in 0..j {
                v -= m[i][p] * m[j][p];
            }
            m[i][j] = v / diag;
        }
    }
    let mut y = vec![0.0; d];
    for i in 0..d {
        let mut v = b[i];
        for p in 0..i {
            v -= m[i][p] * y[p];
        }
        y[i] = v / m[i][i];
    }
    let mut x = vec![0.0; d];
    for i in (0..d).rev() {
        let mut v = y[i];
        for p in i + 1..d {
            v -= m[p][i] * x[p];
        }
        x[i] = v / m[i][i];
    }
    Some(x)
}

fn check_interior(h: &[f64]) -> Result<()> {
    if let Some(bad) = h.iter().find(|&&v| !(v > 0.0 && v < 1.0)) {
        return Err(AutodiffError::Domain {
            op: "projection",
            detail: format!("model score {bad} is not in (0, 1)"),
        }
        .into());
    }
    Ok(())
}

/// Projects `h` onto the affine set described by `sys`.
pub fn solve_projection_system(
    kind: DivergenceKind,
    sys: &LinearConstraintSystem,
    h: &[f64],
    config: &ProjectionSolverConfig,
    warm_duals: Option<&[f64]>,
) -> Result<ProjectionResult> {
    config.validate()?;
    if h.len() != sys.n() {
        return Err(Error::InvalidBatch(format!(
            "{} scores for a constraint system over {} samples",
            h.len(),
            sys.n()
        )));
    }
    check_interior(h)?;
    let problem = DualProblem::new(kind, sys, h)?;
    let tol = config.residual_tolerance;

    let start = match warm_duals {
        Some(w) if w.len() == sys.d_s() && w.iter().all(|v| v.is_finite()) => w
            .iter()
            .zip(&problem.active)
            .map(|(&v, &a)| if a { v } else { 0.0 })
            .collect(),
        _ => vec![0.0; sys.d_s()],
    };
    let mut point = problem.evaluate(start);
    let mut dual_history = vec![point.value];
    let mut iterations = 0;
    let mut converged = point.max_residual() <= tol;

    while !converged && iterations < config.max_iterations {
        let direction = match solve_spd(problem.curvature(&point, 0.0), &point.residuals)
            .or_else(|| solve_spd(problem.curvature(&point, 1e-6), &point.residuals))
        {
            Some(d) => d,
            None => {
                return Err(Error::Solver(
                    "dual curvature is not positive definite".into(),
                ))
            }
        };
        let slope: f64 = direction
            .iter()
            .zip(&point.residuals)
            .map(|(d, r)| d * r)
            .sum();
        let mut step = 1.0;
        let mut accepted = None;
        for _ in 0..60 {
            let trial: Vec<f64> = point
                .duals
                .iter()
                .zip(&direction)
                .map(|(l, d)| l + step * d)
                .collect();
            let candidate = problem.evaluate(trial);
            let armijo = candidate.value >= point.value + 1e-4 * step * slope;
            // Near the optimum the ascent is below rounding of the dual value.
            let flat = candidate.value >= point.value - 1e-14 * (1.0 + point.value.abs())
                && candidate.max_residual() < 0.5 * point.max_residual();
            if armijo || flat {
                accepted = Some(candidate);
                break;
            }
            step *= 0.5;
        }
        let Some(next) = accepted else { break };
        point = next;
        iterations += 1;
        dual_history.push(point.value);
        converged = point.max_residual() <= tol;
    }

    let mut restored = false;
    if !converged && config.restore_feasibility {
        let mut duals = point.duals.clone();
        for _ in 0..100 {
            for k in 0..sys.d_s() {
                if problem.active[k] {
                    problem.solve_coordinate(&mut duals, k, 1e-6 * tol);
                }
            }
            let candidate = problem.evaluate(duals.clone());
            let done = candidate.max_residual() <= tol;
            point = candidate;
            if done {
                break;
            }
        }
        restored = true;
    }

    let objective = point
        .f
        .iter()
        .zip(h)
        .map(|(&f, &hv)| raw_divergence(kind, f, hv))
        .sum::<f64>()
        / h.len() as f64;
    Ok(ProjectionResult {
        f_star: point.f,
        duals: point.duals,
        residuals: point.residuals,
        iterations,
        converged,
        restored,
        dual_history,
        objective,
    })
}

/// Projects `h` onto the scores whose group statistics all equal the overall
/// statistic of `h`.
pub fn solve_projection(
    kind: DivergenceKind,
    stat: &Statistic,
    batch: &SampleBatch,
    h: &[f64],
    config: &ProjectionSolverConfig,
    warm_duals: Option<&[f64]>,
) -> Result<ProjectionResult> {
    check_interior(h)?;
    let c = group_statistics(stat, batch, h)?.overall;
    let sys = fixed_constraints(stat, batch, c)?;
    solve_projection_system(kind, &sys, h, config, warm_duals)
}

/// Mean divergence between the fixed projection `f_star` and `h`, recorded on
/// the tape as a function of `h` only.
pub fn projection_fairret_on(
    tape: &mut Tape,
    kind: DivergenceKind,
    f_star: &[f64],
    h: Var,
) -> Result<Var> {
    let hv = tape.value(h);
    if hv.numel() != f_star.len() {
        return Err(AutodiffError::Shape {
            op: "projection_fairret",
            lhs: vec![f_star.len()],
            rhs: hv.shape().to_vec(),
        }
        .into());
    }
    check_interior(hv.data())?;
    if let Some(bad) = f_star.iter().find(|f| !(0.0..=1.0).contains(*f)) {
        return Err(AutodiffError::Domain {
            op: "projection_fairret",
            detail: format!("projected score {bad} is not in [0, 1]"),
        }
        .into());
    }

    let f = tape.constant(Tensor::vector(f_star.to_vec()));
    let not_f = tape.constant(Tensor::vector(f_star.iter().map(|v| 1.0 - v).collect()));
    let per_sample = match kind {
        DivergenceKind::Kl => {
            // f log f + (1-f) log(1-f) - f log h - (1-f) log(1-h)
            let entropy = tape.constant(Tensor::vector(
                f_star
                    .iter()
                    .map(|&v| xlog_ratio(v, 1.0) + xlog_ratio(1.0 - v, 1.0))
                    .collect(),
            ));
            let log_h = tape.log(h)?;
            let not_h = tape.rsub_scalar(1.0, h)?;
            let log_not_h = tape.log(not_h)?;
            let a = tape.mul(f, log_h)?;
            let b = tape.mul(not_f, log_not_h)?;
            let cross = tape.add(a, b)?;
            tape.sub(entropy, cross)?
        }
        DivergenceKind::Js => {
            let entropy_f = tape.constant(Tensor::vector(
                f_star
                    .iter()
                    .map(|&v| xlog_ratio(v, 1.0) + xlog_ratio(1.0 - v, 1.0))
                    .collect(),
            ));
            let not_h = tape.rsub_scalar(1.0, h)?;
            let sum = tape.add(f, h)?;
            let m = tape.mul_scalar(sum, 0.5)?;
            let not_m = tape.rsub_scalar(1.0, m)?;
            let log_m = tape.log(m)?;
            let log_not_m = tape.log(not_m)?;
            let log_h = tape.log(h)?;
            let log_not_h = tape.log(not_h)?;
            // KL(f || m)
            let a = tape.mul(f, log_m)?;
            let b = tape.mul(not_f, log_not_m)?;
            let cross_f = tape.add(a, b)?;
            let kl_f = tape.sub(entropy_f, cross_f)?;
            // KL(h || m)
            let log_ratio = tape.sub(log_h, log_m)?;
            let log_not_ratio = tape.sub(log_not_h, log_not_m)?;
            let c = tape.mul(h, log_ratio)?;
            let d = tape.mul(not_h, log_not_ratio)?;
            let kl_h = tape.add(c, d)?;
            let total = tape.add(kl_f, kl_h)?;
            tape.mul_scalar(total, 0.5)?
        }
        DivergenceKind::Sed => {
            let diff = tape.sub(h, f)?;
            let sq = tape.mul(diff, diff)?;
            tape.mul_scalar(sq, 2.0)?
        }
    };
    Ok(tape.mean(per_sample)?)
}
