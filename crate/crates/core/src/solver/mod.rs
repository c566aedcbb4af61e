//! Fixed-noise likelihood solvers on `St(p, r) × St(q, r)` and the positive scalars.
//!
//! Both solvers minimize the scalar objective with the noise variances held
//! fixed, keep the loadings exactly orthonormal, and produce a monotone
//! objective trace. [`manifold`] runs Riemannian conjugate gradient on every
//! block jointly. [`bcd`] takes one conjugate-gradient step on the loadings
//! and then updates each component's scalars in closed form.

pub mod bcd;
pub mod manifold;

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};

use crate::error::{PplsError, Result};
use crate::model::{reorder_with_permutation, PplsParams, SampleMoments, EPS_FLOOR};
use crate::objective::{
    coeffs_from, log_grads, nll_from_stats, LoadingProducts, Noise, ProjectedStats, Projection,
};
use crate::stiefel::project_raw;

pub use bcd::{b_cubic_coeffs, b_update, fit_bcd_slm, sigma_h_update, theta_update};
pub use manifold::fit_slm_manifold;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ArmijoOptions {
    pub c1: f64,
    pub backtrack: f64,
    pub init_step: f64,
    pub max_backtracks: usize,
}

impl Default for ArmijoOptions {
    fn default() -> Self {
        ArmijoOptions {
            c1: 1e-4,
            backtrack: 0.5,
            init_step: 1.0,
            max_backtracks: 40,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitOptions {
    /// Threshold on the Riemannian gradient norm.
    pub tol: f64,
    /// Threshold on `|f_k − f_{k+1}| / max(|f_k|, 1)`. Zero disables the test.
    pub rel_tol: f64,
    pub max_iters: usize,
    pub armijo: ArmijoOptions,
    pub eps_floor: f64,
    /// CG restart period; `None` means `10 r`.
    pub restart_every: Option<usize>,
    /// Print one line per iteration to stderr.
    pub trace: bool,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            tol: 1e-6,
            rel_tol: 1e-12,
            max_iters: 1000,
            armijo: ArmijoOptions::default(),
            eps_floor: EPS_FLOOR,
            restart_every: None,
            trace: false,
        }
    }
}

impl FitOptions {
    pub fn validate(&self) -> Result<()> {
        let a = &self.armijo;
        if !(a.c1 > 0.0 && a.c1 < 1.0) || !(a.backtrack > 0.0 && a.backtrack < 1.0) {
            return Err(PplsError::Config(format!(
                "Armijo constants need 0 < c1 < 1 and 0 < backtrack < 1, got {} and {}",
                a.c1, a.backtrack
            )));
        }
        if !(a.init_step > 0.0) || !(self.tol >= 0.0) || !(self.rel_tol >= 0.0) || !(self.eps_floor > 0.0) {
            return Err(PplsError::Config("tolerances and steps must be positive".into()));
        }
        Ok(())
    }

    pub(crate) fn restart_period(&self, r: usize) -> usize {
        self.restart_every.unwrap_or(10 * r).max(1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SolverKind {
    Manifold,
    Bcd,
}

impl fmt::Display for SolverKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SolverKind::Manifold => "manifold",
            SolverKind::Bcd => "bcd",
        })
    }
}

impl FromStr for SolverKind {
    type Err = PplsError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "manifold" | "slm-manifold" => Ok(SolverKind::Manifold),
            "bcd" | "bcd-slm" => Ok(SolverKind::Bcd),
            other => Err(PplsError::Config(format!("unknown solver {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopReason {
    GradientNorm,
    RelativeChange,
    MaxIters,
    LineSearchFailed,
}

#[derive(Debug, Clone)]
pub struct FitReport {
    pub params: PplsParams,
    pub objective_trace: Vec<f64>,
    pub grad_norm_trace: Vec<f64>,
    pub iterations: usize,
    /// Set when the gradient or relative-change test stopped the run.
    pub converged: bool,
    pub stop_reason: StopReason,
    pub wall_time: f64,
    pub solver: SolverKind,
    pub start_index: Option<usize>,
    pub diagnostic: Option<String>,
}

impl FitReport {
    pub fn final_objective(&self) -> f64 {
        *self.objective_trace.last().expect("trace holds the initial value")
    }

    pub fn final_grad_norm(&self) -> f64 {
        *self.grad_norm_trace.last().expect("trace holds the initial value")
    }

    /// True when every entry is at most the previous one plus `slack`.
    pub fn is_monotone(&self, slack: f64) -> bool {
        self.objective_trace.windows(2).all(|w| w[1] <= w[0] + slack)
    }
}

/// Runs the chosen solver.
pub fn fit(
    solver: SolverKind,
    init: &PplsParams,
    moments: &SampleMoments,
    opts: &FitOptions,
) -> Result<FitReport> {
    let (se2, sf2) = (init.sigma_e2, init.sigma_f2);
    match solver {
        SolverKind::Manifold => fit_slm_manifold(init, moments, se2, sf2, opts),
        SolverKind::Bcd => fit_bcd_slm(init, moments, se2, sf2, opts),
    }
}

/// Outcome of a backtracking line search.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ArmijoOutcome {
    pub alpha: f64,
    pub value: f64,
    pub backtracks: usize,
}

/// Backtracking from `init_step`: the first `α = init·β^k` with
/// `φ(α) ≤ f0 + c1 α g0` is accepted. `g0` is the directional derivative at 0.
pub fn armijo_step<F: FnMut(f64) -> f64>(
    mut phi: F,
    f0: f64,
    g0: f64,
    init_step: f64,
    opts: &ArmijoOptions,
) -> Result<ArmijoOutcome> {
    if !(g0 < 0.0) {
        return Err(PplsError::Input(format!(
            "line search needs a descent direction, got directional derivative {g0:e}"
        )));
    }
    let mut alpha = init_step;
    for backtracks in 0..=opts.max_backtracks {
        let value = phi(alpha);
        if value <= f0 + opts.c1 * alpha * g0 {
            return Ok(ArmijoOutcome {
                alpha,
                value,
                backtracks,
            });
        }
        if backtracks < opts.max_backtracks {
            alpha *= opts.backtrack;
        }
    }
    Err(PplsError::LineSearch {
        backtracks: opts.max_backtracks,
        last_step: alpha,
    })
}

/// A tangent vector of the product `St(p, r) × St(q, r) × R^k`.
#[derive(Debug, Clone, PartialEq)]
pub struct Direction {
    pub w: DMatrix<f64>,
    pub c: DMatrix<f64>,
    pub s: DVector<f64>,
}

impl Direction {
    pub fn dot(&self, other: &Direction) -> f64 {
        self.w.dot(&other.w) + self.c.dot(&other.c) + self.s.dot(&other.s)
    }

    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn scaled(&self, a: f64) -> Direction {
        Direction {
            w: &self.w * a,
            c: &self.c * a,
            s: &self.s * a,
        }
    }

    /// Moves the loading parts into the tangent spaces at `(w, c)`.
    pub fn transport(&self, w: &DMatrix<f64>, c: &DMatrix<f64>) -> Direction {
        Direction {
            w: project_raw(w, &self.w),
            c: project_raw(c, &self.c),
            s: self.s.clone(),
        }
    }

    /// Applies a component permutation with joint `(w, c)` sign flips.
    pub(crate) fn permute(&self, perm: &[usize], flips: &[bool]) -> Direction {
        let mut out = self.clone();
        for (k, &src) in perm.iter().enumerate() {
            let sign = if flips[k] { -1.0 } else { 1.0 };
            out.w.set_column(k, &(self.w.column(src) * sign));
            out.c.set_column(k, &(self.c.column(src) * sign));
        }
        if self.s.len() == 2 * perm.len() + 1 {
            for (k, &src) in perm.iter().enumerate() {
                out.s[2 * k] = self.s[2 * src];
                out.s[2 * k + 1] = self.s[2 * src + 1];
            }
        }
        out
    }
}

/// Polak–Ribière conjugate direction, clipped at zero and restarted to
/// steepest descent when the result is not a descent direction. Previous
/// vectors must already be transported to the current point. Returns the
/// direction and whether it fell back to `−grad`.
pub fn rcg_direction(
    grad_now: &Direction,
    prev: Option<(&Direction, &Direction)>,
) -> (Direction, bool) {
    let steepest = grad_now.scaled(-1.0);
    let Some((grad_prev, dir_prev)) = prev else {
        return (steepest, true);
    };
    let denom = grad_prev.dot(grad_prev);
    if !(denom > 0.0) {
        return (steepest, true);
    }
    let beta = ((grad_now.dot(grad_now) - grad_now.dot(grad_prev)) / denom).max(0.0);
    if beta == 0.0 {
        return (steepest, true);
    }
    let d = Direction {
        w: &steepest.w + &dir_prev.w * beta,
        c: &steepest.c + &dir_prev.c * beta,
        s: &steepest.s + &dir_prev.s * beta,
    };
    if d.dot(grad_now) >= 0.0 {
        (steepest, true)
    } else {
        (d, false)
    }
}

/// Objective value and the pieces needed for gradients at one point.
pub(crate) struct Evaluation {
    pub value: f64,
    pub proj: Projection,
    pub stats: ProjectedStats,
}

pub(crate) fn evaluate(params: &PplsParams, moments: &SampleMoments) -> Result<Evaluation> {
    let proj = Projection::new(params.w.matrix(), params.c.matrix(), moments);
    let stats = proj.stats(params.sigma_e2, params.sigma_f2);
    let value = nll_from_stats(&params.theta_t2, &params.b, &Noise::of(params), &stats)?.total;
    Ok(Evaluation { value, proj, stats })
}

/// Objective value (`+∞` when it cannot be evaluated) with the products and
/// projected statistics behind it.
pub(crate) fn value_and_stats(
    params: &PplsParams,
    moments: &SampleMoments,
) -> (f64, LoadingProducts, ProjectedStats) {
    let (w, c) = (params.w.matrix(), params.c.matrix());
    let products = LoadingProducts::new(w, c, moments);
    let stats = products.stats(w, c, moments, params.sigma_e2, params.sigma_f2);
    let value = match nll_from_stats(&params.theta_t2, &params.b, &Noise::of(params), &stats) {
        Ok(p) if p.total.is_finite() => p.total,
        _ => f64::INFINITY,
    };
    (value, products, stats)
}

/// Full evaluation from products already formed at `params`.
pub(crate) fn evaluate_from(
    params: &PplsParams,
    moments: &SampleMoments,
    products: LoadingProducts,
) -> Result<Evaluation> {
    let proj = Projection::from_products(params.w.matrix(), params.c.matrix(), moments, products);
    let stats = proj.stats(params.sigma_e2, params.sigma_f2);
    let value = nll_from_stats(&params.theta_t2, &params.b, &Noise::of(params), &stats)?.total;
    Ok(Evaluation { value, proj, stats })
}

/// Riemannian gradient on all blocks. Log-coordinate entries for parameters
/// held fixed (PCCA's `b` and `σ_h²`) are zeroed.
pub(crate) fn riemannian_gradient(params: &PplsParams, ev: &Evaluation) -> Direction {
    let noise = Noise::of(params);
    let coeffs = coeffs_from(&params.theta_t2, &params.b, &noise);
    let (gw, gc) = ev.proj.grads(&coeffs, &noise);
    let mut s = log_grads(&params.theta_t2, &params.b, &noise, &ev.stats);
    if params.pcca {
        let r = params.r();
        for i in 0..r {
            s[2 * i + 1] = 0.0;
        }
        s[2 * r] = 0.0;
    }
    Direction {
        w: project_raw(params.w.matrix(), &gw),
        c: project_raw(params.c.matrix(), &gc),
        s,
    }
}

/// Flips `c_i` wherever the cross statistic is negative (a descent move,
/// since `b_i > 0`), then reorders components. Returns the new point, the
/// permutation and flips of the reorder, and whether any `c_i` was flipped.
pub(crate) fn canonicalize(
    params: &PplsParams,
    stats: Option<&ProjectedStats>,
) -> (PplsParams, Vec<usize>, Vec<bool>, bool) {
    let mut p = params.clone();
    let mut flipped = false;
    if let Some(st) = stats {
        for i in 0..p.r() {
            if st.qxy[i] < 0.0 {
                p.c.flip_column(i);
                flipped = true;
            }
        }
    }
    let (out, perm, flips) = reorder_with_permutation(&p);
    (out, perm, flips, flipped)
}

pub(crate) fn is_identity(perm: &[usize], flips: &[bool]) -> bool {
    perm.iter().enumerate().all(|(k, &s)| k == s) && flips.iter().all(|f| !f)
}

/// `‖f_k − f_{k+1}‖ / max(|f_k|, 1)`.
pub(crate) fn relative_change(prev: f64, next: f64) -> f64 {
    (prev - next).abs() / prev.abs().max(1.0)
}

pub(crate) fn check_fit_inputs(
    init: &PplsParams,
    moments: &SampleMoments,
    sigma_e2: f64,
    sigma_f2: f64,
    opts: &FitOptions,
) -> Result<PplsParams> {
    opts.validate()?;
    if init.p() != moments.p() || init.q() != moments.q() {
        return Err(PplsError::Dimension(format!(
            "parameters are {}x{} but moments are {}x{}",
            init.p(),
            init.q(),
            moments.p(),
            moments.q()
        )));
    }
    if !(sigma_e2 > 0.0 && sigma_f2 > 0.0) {
        return Err(PplsError::Input("noise variances must be positive".into()));
    }
    let mut p = init.clone();
    p.sigma_e2 = sigma_e2;
    p.sigma_f2 = sigma_f2;
    for v in p.theta_t2.iter_mut() {
        *v = v.max(opts.eps_floor);
    }
    p.validate()?;
    Ok(p)
}

pub(crate) struct TraceLog {
    pub start: Instant,
    pub objective: Vec<f64>,
    pub grad_norm: Vec<f64>,
    pub verbose: bool,
    pub label: &'static str,
}

impl TraceLog {
    pub fn new(label: &'static str, verbose: bool) -> Self {
        TraceLog {
            start: Instant::now(),
            objective: Vec::new(),
            grad_norm: Vec::new(),
            verbose,
            label,
        }
    }

    pub fn push(&mut self, f: f64, g: f64) {
        if self.verbose {
            eprintln!(
                "[{}] iter {:>5}  f = {:.17e}  |grad| = {:.6e}",
                self.label,
                self.objective.len(),
                f,
                g
            );
        }
        self.objective.push(f);
        self.grad_norm.push(g);
    }
}
