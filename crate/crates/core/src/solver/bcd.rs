//! Block coordinate descent: a conjugate-gradient step on the loadings, then
//! exact per-component updates of `θ²_i` and `b_i`, then a one-dimensional
//! solve for `σ_h²`.

use nalgebra::DVector;

use super::manifold::{joint_step, SIGMA_H_FLOOR};
use super::{
    armijo_step, canonicalize, check_fit_inputs, evaluate, is_identity, rcg_direction,
    relative_change, riemannian_gradient, evaluate_from, value_and_stats, Direction, FitOptions, FitReport,
    SolverKind, StopReason, TraceLog,
};
use crate::error::{PplsError, Result};
use crate::model::{PplsParams, SampleMoments};
use crate::objective::{ComponentStats, ComponentTerm, LoadingProducts, Noise, ProjectedStats};
use crate::univariate::{brent_minimize, cubic_positive_root, CubicCoeffs};

fn cross_stat(qxy: f64, sigma_e2: f64, sigma_f2: f64) -> f64 {
    qxy * (sigma_e2 * sigma_f2).sqrt()
}

/// Minimizer of `ℓ_i` over `θ²_i > 0` with the other arguments fixed, clipped
/// below at `eps`. `ℓ_i` has a single stationary point in `θ²_i`, and when it
/// is not positive `ℓ_i` increases on `(0, ∞)`.
#[allow(clippy::too_many_arguments)]
pub fn theta_update(
    qx: f64,
    qy: f64,
    qxy: f64,
    b: f64,
    sigma_h2: f64,
    sigma_e2: f64,
    sigma_f2: f64,
    eps: f64,
) -> f64 {
    let a = sigma_f2 + sigma_h2;
    let x = cross_stat(qxy, sigma_e2, sigma_f2);
    let d = a + b * b * sigma_e2;
    let n = a * qx + (sigma_h2 + b * b * sigma_e2) * qy + b * x;
    let star = sigma_e2 * ((n - d) * a - d * sigma_h2 * qy) / (d * d);
    if star.is_finite() {
        star.max(eps)
    } else {
        eps
    }
}

/// Coefficients of the cubic whose unique positive root is the minimizer of
/// `ℓ_i` over `b_i > 0`.
pub fn b_cubic_coeffs(
    qx: f64,
    qy: f64,
    qxy: f64,
    theta_t2: f64,
    sigma_h2: f64,
    sigma_e2: f64,
    sigma_f2: f64,
) -> CubicCoeffs {
    let s = theta_t2;
    let al = sigma_e2;
    let a = sigma_f2 + sigma_h2;
    let x = cross_stat(qxy, sigma_e2, sigma_f2);
    let r = a * ((s + al) * (1.0 - qy) + s * qx) + sigma_h2 * (s + al) * qy;
    CubicCoeffs {
        c3: 2.0 * al * al * s,
        c2: al * s * x,
        c1: 2.0 * al * r,
        c0: -x * a * (s + al),
    }
}

/// Minimizer of `ℓ_i` over `b_i > 0`. `None` when `Q_xy(i) = 0`, where the
/// stationarity equation degenerates.
pub fn b_update(
    qx: f64,
    qy: f64,
    qxy: f64,
    theta_t2: f64,
    sigma_h2: f64,
    sigma_e2: f64,
    sigma_f2: f64,
) -> Result<Option<f64>> {
    if qxy == 0.0 {
        return Ok(None);
    }
    if qxy < 0.0 {
        return Err(PplsError::Input(format!(
            "b update needs a positive cross statistic, got {qxy:e}"
        )));
    }
    let c = b_cubic_coeffs(qx, qy, qxy, theta_t2, sigma_h2, sigma_e2, sigma_f2);
    cubic_positive_root(&c).map(Some)
}

fn reduced(theta: &DVector<f64>, b: &DVector<f64>, noise: &Noise, stats: &ProjectedStats) -> f64 {
    (0..theta.len())
        .map(|i| ComponentTerm::new(theta[i], b[i], noise, &stats.component(i)).value())
        .sum()
}

/// Minimizer of `Σ_i ℓ_i` over `σ_h² ∈ [1e-10, upper]`. The upper end grows
/// by decades while the objective is still decreasing there; a log-spaced
/// scan picks the basin, Brent's method refines it in `ln σ_h²`, and Newton
/// steps on the closed-form derivative finish to machine precision. The
/// current value is kept if the result is not an improvement.
pub fn sigma_h_update(
    stats: &ProjectedStats,
    theta: &DVector<f64>,
    b: &DVector<f64>,
    sigma_e2: f64,
    sigma_f2: f64,
    current: f64,
) -> f64 {
    let f = |h: f64| {
        let noise = Noise {
            sigma_e2,
            sigma_f2,
            sigma_h2: h,
        };
        let v = reduced(theta, b, &noise, stats);
        if v.is_finite() {
            v
        } else {
            f64::INFINITY
        }
    };
    let lo = SIGMA_H_FLOOR;
    let mut upper = (10.0 * current).max(10.0);
    while upper < 1e12 && f(upper) < f(upper / 10.0) {
        upper *= 10.0;
    }
    let (llo, lhi) = (lo.ln(), upper.ln());
    let steps = 64;
    let grid: Vec<f64> = (0..=steps)
        .map(|k| llo + (lhi - llo) * k as f64 / steps as f64)
        .collect();
    let vals: Vec<f64> = grid.iter().map(|&g| f(g.exp())).collect();
    let k = (0..vals.len())
        .min_by(|&i, &j| vals[i].total_cmp(&vals[j]))
        .unwrap_or(0);
    let a = grid[k.saturating_sub(1)];
    let bb = grid[(k + 1).min(steps)];
    let m = brent_minimize(|t| f(t.exp()), a, bb, 1e-12, 200);
    let grad = |h: f64| {
        let noise = Noise {
            sigma_e2,
            sigma_f2,
            sigma_h2: h,
        };
        let (mut g1, mut g2) = (0.0, 0.0);
        for i in 0..theta.len() {
            let t = ComponentTerm::new(theta[i], b[i], &noise, &stats.component(i));
            g1 += t.dg();
            g2 += t.dgg();
        }
        (g1, g2)
    };
    // Function values are flat to rounding near the minimum, so the Newton
    // polish is accepted on decrease of |derivative| instead.
    let mut h = m.x.exp();
    let (mut g1, mut g2) = grad(h);
    for _ in 0..8 {
        if !(g2 > 0.0) || g1 == 0.0 {
            break;
        }
        let next = (h - g1 / g2).clamp(lo, upper);
        let (n1, n2) = grad(next);
        if !(n1.abs() < g1.abs()) {
            break;
        }
        h = next;
        g1 = n1;
        g2 = n2;
    }
    let fh = f(h);
    if fh <= f(current) {
        h
    } else {
        current
    }
}

/// Runs the per-component `(θ², b)` updates and then the `σ_h²` update,
/// with `(W, C)` fixed. Requires every cross statistic to be non-negative.
pub(crate) fn scalar_sweep(params: &mut PplsParams, stats: &ProjectedStats, eps: f64) -> Result<()> {
    let noise = Noise::of(params);
    for i in 0..params.r() {
        let st: ComponentStats = stats.component(i);
        let before = ComponentTerm::new(params.theta_t2[i], params.b[i], &noise, &st).value();
        let s_new = theta_update(
            stats.qx[i],
            stats.qy[i],
            stats.qxy[i],
            params.b[i],
            noise.sigma_h2,
            noise.sigma_e2,
            noise.sigma_f2,
            eps,
        );
        let after = ComponentTerm::new(s_new, params.b[i], &noise, &st).value();
        if after <= before {
            params.theta_t2[i] = s_new;
        }
        if params.pcca {
            continue;
        }
        let before = ComponentTerm::new(params.theta_t2[i], params.b[i], &noise, &st).value();
        if let Some(b_new) = b_update(
            stats.qx[i],
            stats.qy[i],
            stats.qxy[i],
            params.theta_t2[i],
            noise.sigma_h2,
            noise.sigma_e2,
            noise.sigma_f2,
        )? {
            let b_new = b_new.max(eps);
            let after = ComponentTerm::new(params.theta_t2[i], b_new, &noise, &st).value();
            if after <= before {
                params.b[i] = b_new;
            }
        }
    }
    if !params.pcca {
        params.sigma_h2 = sigma_h_update(
            stats,
            &params.theta_t2,
            &params.b,
            params.sigma_e2,
            params.sigma_f2,
            params.sigma_h2,
        );
    }
    Ok(())
}

/// Fits by block coordinate descent. One outer iteration is a CG step on the
/// loadings, a sign fix of negative cross statistics, the closed-form scalar
/// sweep, and a reorder.
pub fn fit_bcd_slm(
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
    let mut log = TraceLog::new("bcd", opts.trace);
    log.push(ev.value, grad.norm());

    let r = params.r();
    let period = opts.restart_period(r);
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
        let f_prev = ev.value;
        let loading_grad = Direction {
            w: grad.w.clone(),
            c: grad.c.clone(),
            s: DVector::zeros(0),
        };
        let mut loading_failed = false;
        let mut moved: Option<(LoadingProducts, ProjectedStats)> = None;
        if loading_grad.norm() > 0.0 {
            let mut attempt = 0;
            loop {
                let prev = if since_restart >= period || attempt > 0 {
                    None
                } else {
                    memory.as_ref().map(|(g, d)| {
                        (
                            g.transport(params.w.matrix(), params.c.matrix()),
                            d.transport(params.w.matrix(), params.c.matrix()),
                        )
                    })
                };
                let (dir, restarted) =
                    rcg_direction(&loading_grad, prev.as_ref().map(|(g, d)| (g, d)));
                if restarted {
                    since_restart = 0;
                }
                since_restart += 1;
                let g0 = dir.dot(&loading_grad);
                let mut last: Option<(f64, PplsParams, LoadingProducts, ProjectedStats)> = None;
                let outcome = armijo_step(
                    |a| match joint_step(&params, &dir, a, opts.eps_floor) {
                        Some(p) => {
                            let (value, prod, st) = value_and_stats(&p, moments);
                            last = Some((a, p, prod, st));
                            value
                        }
                        None => f64::INFINITY,
                    },
                    ev.value,
                    g0,
                    step_init,
                    &opts.armijo,
                );
                match outcome {
                    Ok(out) => {
                        step_init = (2.0 * out.alpha).min(opts.armijo.init_step);
                        match last {
                            Some((a, p, prod, st)) if a == out.alpha => {
                                params = p;
                                moved = Some((prod, st));
                            }
                            _ => {
                                params = joint_step(&params, &dir, out.alpha, opts.eps_floor)
                                    .expect("accepted step is evaluable");
                            }
                        }
                        memory = Some((loading_grad.clone(), dir));
                        break;
                    }
                    Err(PplsError::LineSearch { backtracks, last_step }) => {
                        memory = None;
                        step_init = opts.armijo.init_step;
                        if restarted || attempt > 0 {
                            loading_failed = true;
                            diagnostic = Some(format!(
                                "loading line search failed after {backtracks} backtracks (last step {last_step:e})"
                            ));
                            break;
                        }
                        attempt += 1;
                    }
                    Err(e) => return Err(e),
                }
            }
        }

        // Scalar updates leave the products unchanged, and flips and reorders
        // only permute or negate their columns.
        let (mut products, mut stats) = match moved {
            Some(ps) => ps,
            None => {
                let e = evaluate(&params, moments)?;
                (e.proj.products(), e.stats)
            }
        };
        let mut c_flipped = false;
        for i in 0..r {
            if stats.qxy[i] < 0.0 {
                params.c.flip_column(i);
                products.flip_c(i);
                stats.qxy[i] = -stats.qxy[i];
                c_flipped = true;
            }
        }
        scalar_sweep(&mut params, &stats, opts.eps_floor)?;
        let (canon, perm, flips) = crate::model::reorder_with_permutation(&params);
        params = canon;
        if !is_identity(&perm, &flips) {
            products = products.permute_and_flip(&perm, &flips);
        }
        if c_flipped {
            memory = None;
        } else if !is_identity(&perm, &flips) {
            memory = memory.map(|(g, d)| (g.permute(&perm, &flips), d.permute(&perm, &flips)));
        }

        ev = evaluate_from(&params, moments, products)?;
        grad = riemannian_gradient(&params, &ev);
        iterations += 1;
        log.push(ev.value, grad.norm());
        let rel = relative_change(f_prev, ev.value);
        if grad.norm() < opts.tol {
            reason = StopReason::GradientNorm;
        } else if opts.rel_tol > 0.0 && rel < opts.rel_tol {
            reason = StopReason::RelativeChange;
        } else if loading_failed && ev.value >= f_prev {
            reason = StopReason::LineSearchFailed;
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
        solver: SolverKind::Bcd,
        start_index: None,
        diagnostic,
    })
}
