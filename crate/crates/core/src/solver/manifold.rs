//! Joint Riemannian conjugate gradient on loadings and log-scalars.

use nalgebra::DVector;

use super::{
    armijo_step, canonicalize, check_fit_inputs, evaluate, is_identity, rcg_direction,
    relative_change, riemannian_gradient, value_and_stats, Direction, FitOptions, FitReport,
    SolverKind, StopReason, TraceLog,
};
use crate::error::{PplsError, Result};
use crate::model::{PplsParams, SampleMoments};
use crate::objective::ProjectedStats;
use crate::stiefel::{qr_retract, TangentVector};

/// Lower bound on `σ_h²` while moving in log coordinates.
pub(crate) const SIGMA_H_FLOOR: f64 = 1e-10;

/// Fits by conjugate gradient on `St(p, r) × St(q, r)` and the log-scalars.
/// Each iteration takes one Armijo step along a joint direction, then flips
/// and reorders components into canonical form.
pub fn fit_slm_manifold(
    init: &PplsParams,
    moments: &SampleMoments,
    sigma_e2: f64,
    sigma_f2: f64,
    opts: &FitOptions,
) -> Result<FitReport> {
    let params0 = check_fit_inputs(init, moments, sigma_e2, sigma_f2, opts)?;
    let ev0 = evaluate(&params0, moments)?;
    let (mut params, _, _, _) = canonicalize(&params0, Some(&ev0.stats));
    let mut ev = evaluate(&params, moments)?;
    let mut grad = riemannian_gradient(&params, &ev);
    let mut log = TraceLog::new("manifold", opts.trace);
    log.push(ev.value, grad.norm());

    let period = opts.restart_period(params.r());
    let mut memory: Option<(Direction, Direction)> = None;
    let mut since_restart = 0usize;
    let mut step_init = opts.armijo.init_step;
    let mut iterations = 0usize;
    let mut reason = StopReason::MaxIters;
    let mut diagnostic = None;

    if grad.norm() < opts.tol {
        reason = StopReason::GradientNorm;
    }
    while reason == StopReason::MaxIters && iterations < opts.max_iters {
        let prev = if since_restart >= period {
            None
        } else {
            memory.as_ref().map(|(g, d)| {
                (
                    g.transport(params.w.matrix(), params.c.matrix()),
                    d.transport(params.w.matrix(), params.c.matrix()),
                )
            })
        };
        let (dir, restarted) = rcg_direction(&grad, prev.as_ref().map(|(g, d)| (g, d)));
        if restarted {
            since_restart = 0;
        }
        since_restart += 1;
        let g0 = dir.dot(&grad);
        let mut last: Option<(f64, PplsParams, ProjectedStats)> = None;
        let outcome = armijo_step(
            |a| match joint_step(&params, &dir, a, opts.eps_floor) {
                Some(p) => {
                    let (value, _, st) = value_and_stats(&p, moments);
                    last = Some((a, p, st));
                    value
                }
                None => f64::INFINITY,
            },
            ev.value,
            g0,
            step_init,
            &opts.armijo,
        );
        let out = match outcome {
            Ok(out) => out,
            Err(PplsError::LineSearch { backtracks, last_step }) => {
                if restarted {
                    reason = StopReason::LineSearchFailed;
                    diagnostic = Some(format!(
                        "steepest-descent line search failed after {backtracks} backtracks (last step {last_step:e}) at |grad| = {:e}",
                        grad.norm()
                    ));
                    break;
                }
                memory = None;
                step_init = opts.armijo.init_step;
                continue;
            }
            Err(e) => return Err(e),
        };
        step_init = (2.0 * out.alpha).min(opts.armijo.init_step);
        let (moved, moved_stats) = match last {
            Some((a, p, st)) if a == out.alpha => (p, st),
            _ => {
                let p = joint_step(&params, &dir, out.alpha, opts.eps_floor)
                    .expect("accepted step is evaluable");
                let st = evaluate(&p, moments)?.stats;
                (p, st)
            }
        };
        let f_prev = ev.value;
        let (canon, perm, flips, c_flipped) = canonicalize(&moved, Some(&moved_stats));
        ev = evaluate(&canon, moments)?;
        memory = if c_flipped {
            None
        } else if is_identity(&perm, &flips) {
            Some((grad, dir))
        } else {
            Some((grad.permute(&perm, &flips), dir.permute(&perm, &flips)))
        };
        params = canon;
        grad = riemannian_gradient(&params, &ev);
        iterations += 1;
        log.push(ev.value, grad.norm());
        if grad.norm() < opts.tol {
            reason = StopReason::GradientNorm;
        } else if opts.rel_tol > 0.0 && relative_change(f_prev, ev.value) < opts.rel_tol {
            reason = StopReason::RelativeChange;
        }
    }

    Ok(FitReport {
        params,
        objective_trace: log.objective,
        grad_norm_trace: log.grad_norm,
        iterations,
        converged: matches!(reason, StopReason::GradientNorm | StopReason::RelativeChange),
        stop_reason: reason,
        wall_time: log.start.elapsed().as_secs_f64(),
        solver: SolverKind::Manifold,
        start_index: None,
        diagnostic,
    })
}

/// Point reached by moving `alpha` along `dir`: QR retraction for the
/// loadings, additive steps in log coordinates for the scalars.
pub(crate) fn joint_step(
    params: &PplsParams,
    dir: &Direction,
    alpha: f64,
    eps: f64,
) -> Option<PplsParams> {
    let w = qr_retract(
        &params.w,
        &TangentVector::from_matrix_unchecked(dir.w.clone()),
        alpha,
    )
    .ok()?;
    let c = qr_retract(
        &params.c,
        &TangentVector::from_matrix_unchecked(dir.c.clone()),
        alpha,
    )
    .ok()?;
    let r = params.r();
    let mut theta = params.theta_t2.clone();
    let mut b = params.b.clone();
    let mut sigma_h2 = params.sigma_h2;
    if dir.s.len() == 2 * r + 1 {
        theta = DVector::from_fn(r, |i, _| (params.theta_t2[i].ln() + alpha * dir.s[2 * i]).exp().max(eps));
        if !params.pcca {
            b = DVector::from_fn(r, |i, _| (params.b[i].ln() + alpha * dir.s[2 * i + 1]).exp().max(eps));
            sigma_h2 = (params.sigma_h2.ln() + alpha * dir.s[2 * r]).exp().max(SIGMA_H_FLOOR);
        }
    }
    if !theta.iter().chain(b.iter()).all(|v| v.is_finite()) || !sigma_h2.is_finite() {
        return None;
    }
    Some(PplsParams {
        w,
        c,
        theta_t2: theta,
        b,
        sigma_h2,
        ..params.clone()
    })
}
