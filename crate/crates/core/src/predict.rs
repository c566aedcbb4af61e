//! Conditional Gaussian prediction of `y` given `x`, shrinkage and dispersion
//! calibration, predictive intervals and their evaluation.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{PplsError, Result};
use crate::model::{symmetrize, PplsParams, SampleMoments};
use crate::normal::z_two_sided;
use crate::pipeline::{complement, kfold, select_rows, shift_rows, MultiStartConfig};
use crate::rng::RngStream;
use crate::solver::fit;

/// Smallest dispersion kept after calibration.
pub const KAPPA_FLOOR: f64 = 1e-12;

/// Entries of the conditional covariance spectrum allowed below zero.
const PSD_TOL: f64 = 1e-8;

/// `y | x ~ N(μ̂(x), κ Σ̂_{y|x})` with `γ σ_e²` in the `x`-view inverse.
#[derive(Debug, Clone)]
pub struct PredictiveLaw {
    pub params: PplsParams,
    pub gamma: f64,
    pub kappa: f64,
    pub mean_x: DVector<f64>,
    pub mean_y: DVector<f64>,
    /// `(W Σ_t Wᵀ + γσ_e² I)⁻¹ W Σ_t B`, `p × r`.
    gain: DMatrix<f64>,
    cov: DMatrix<f64>,
    cov_chol: Cholesky<f64, Dyn>,
}

impl PredictiveLaw {
    pub fn new(
        params: PplsParams,
        gamma: f64,
        mean_x: DVector<f64>,
        mean_y: DVector<f64>,
    ) -> Result<Self> {
        if !(gamma > 0.0) || !gamma.is_finite() {
            return Err(PplsError::Config(format!("gamma must be positive, got {gamma}")));
        }
        if mean_x.len() != params.p() || mean_y.len() != params.q() {
            return Err(PplsError::Dimension("means do not match the parameters".into()));
        }
        let w = params.w.matrix();
        let c = params.c.matrix();
        let r = params.r();
        let tau = gamma * params.sigma_e2;
        let sig = &params.theta_t2;
        // Woodbury: (τI + WΣWᵀ)⁻¹W = (W − W K⁻¹ WᵀW / τ) / τ with K = Σ⁻¹ + WᵀW / τ.
        let wtw = w.tr_mul(w);
        let mut core = &wtw / tau;
        for i in 0..r {
            core[(i, i)] += 1.0 / sig[i];
        }
        let core = core
            .cholesky()
            .ok_or_else(|| PplsError::Numerical("r x r Woodbury core is singular".into()))?;
        let solve_w = (w - w * core.solve(&wtw) / tau) / tau;
        let sb = DVector::from_fn(r, |i, _| sig[i] * params.b[i]);
        let gain = DMatrix::from_fn(w.nrows(), r, |a, i| solve_w[(a, i)] * sb[i]);
        // C [B²Σ_t + σ_h² I − BΣ_t Wᵀ(...)⁻¹ W Σ_t B] Cᵀ + σ_f² I.
        let mut inner = -(DMatrix::from_diagonal(&sb) * w.tr_mul(&gain));
        for i in 0..r {
            inner[(i, i)] += params.b[i] * params.b[i] * sig[i] + params.sigma_h2;
        }
        let mut cov = symmetrize(c * inner * c.transpose());
        for j in 0..cov.nrows() {
            cov[(j, j)] += params.sigma_f2;
        }
        if !cov.iter().all(|v| v.is_finite()) {
            return Err(PplsError::Numerical("conditional covariance is non-finite".into()));
        }
        let min_eig = cov.clone().symmetric_eigenvalues().min();
        if min_eig < -PSD_TOL {
            return Err(PplsError::Numerical(format!(
                "conditional covariance is not PSD (min eigenvalue {min_eig:e})"
            )));
        }
        let cov_chol = cov
            .clone()
            .cholesky()
            .ok_or_else(|| PplsError::Numerical("conditional covariance is singular".into()))?;
        Ok(PredictiveLaw {
            params,
            gamma,
            kappa: 1.0,
            mean_x,
            mean_y,
            gain,
            cov,
            cov_chol,
        })
    }

    /// Law with means taken from the training moments.
    pub fn from_moments(params: PplsParams, gamma: f64, moments: &SampleMoments) -> Result<Self> {
        Self::new(params, gamma, moments.mean_x.clone(), moments.mean_y.clone())
    }

    pub fn p(&self) -> usize {
        self.params.p()
    }

    pub fn q(&self) -> usize {
        self.params.q()
    }

    /// Sets `κ`, flooring at [`KAPPA_FLOOR`]. Returns true when the floor applied.
    pub fn set_kappa(&mut self, kappa: f64) -> bool {
        if kappa < KAPPA_FLOOR || !kappa.is_finite() {
            self.kappa = KAPPA_FLOOR;
            true
        } else {
            self.kappa = kappa;
            false
        }
    }

    /// `μ̂(x)` for one raw (uncentered) row.
    pub fn mean(&self, x_new: &DVector<f64>) -> Result<DVector<f64>> {
        if x_new.len() != self.p() {
            return Err(PplsError::Dimension(format!(
                "expected {} features, got {}",
                self.p(),
                x_new.len()
            )));
        }
        let xc = x_new - &self.mean_x;
        let scores = self.gain.tr_mul(&xc);
        Ok(self.params.c.matrix() * scores + &self.mean_y)
    }

    /// Predictive means for every row of `x`.
    pub fn mean_rows(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if x.ncols() != self.p() {
            return Err(PplsError::Dimension(format!(
                "expected {} features, got {}",
                self.p(),
                x.ncols()
            )));
        }
        let xc = shift_rows(x, &self.mean_x);
        let mut out = xc * &self.gain * self.params.c.matrix().transpose();
        for (j, mut col) in out.column_iter_mut().enumerate() {
            col.add_scalar_mut(self.mean_y[j]);
        }
        Ok(out)
    }

    /// Conditional covariance before the `κ` scale. It does not depend on `x`.
    pub fn cov(&self) -> &DMatrix<f64> {
        &self.cov
    }

    pub fn cov_at(&self, _x_new: &DVector<f64>) -> &DMatrix<f64> {
        &self.cov
    }

    /// `rᵢᵀ Σ̂_{y|x}⁻¹ rᵢ` for each row's residual.
    pub fn quad_forms(&self, x: &DMatrix<f64>, y: &DMatrix<f64>) -> Result<Vec<f64>> {
        if y.nrows() != x.nrows() || y.ncols() != self.q() {
            return Err(PplsError::Dimension("X and Y shapes do not match the law".into()));
        }
        let resid = (y - self.mean_rows(x)?).transpose();
        let solved = self.cov_chol.solve(&resid);
        Ok((0..resid.ncols())
            .map(|i| resid.column(i).dot(&solved.column(i)))
            .collect())
    }
}

/// `κ̂ = (n q)⁻¹ Σᵢ rᵢᵀ V⁻¹ rᵢ`. Zero residuals give zero; see
/// [`PredictiveLaw::set_kappa`] for the floor.
pub fn calibrate_kappa(law: &PredictiveLaw, x_val: &DMatrix<f64>, y_val: &DMatrix<f64>) -> Result<f64> {
    if x_val.nrows() == 0 {
        return Err(PplsError::Input("calibration needs at least one row".into()));
    }
    let qf = law.quad_forms(x_val, y_val)?;
    Ok(qf.iter().sum::<f64>() / (qf.len() * law.q()) as f64)
}

/// Element-wise predictive intervals `μ̂ ± z_{1−α/2} √(κ Σ̂_jj)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Intervals {
    pub alpha: f64,
    pub mean: DMatrix<f64>,
    pub lo: DMatrix<f64>,
    pub hi: DMatrix<f64>,
}

pub fn intervals(law: &PredictiveLaw, x_new: &DMatrix<f64>, alpha: f64) -> Result<Intervals> {
    let mean = law.mean_rows(x_new)?;
    intervals_from_mean(law, mean, alpha)
}

fn intervals_from_mean(law: &PredictiveLaw, mean: DMatrix<f64>, alpha: f64) -> Result<Intervals> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(PplsError::Config(format!("alpha must lie in (0, 1), got {alpha}")));
    }
    let z = z_two_sided(alpha);
    let half = DVector::from_fn(law.q(), |j, _| z * (law.kappa * law.cov[(j, j)]).sqrt());
    let lo = DMatrix::from_fn(mean.nrows(), mean.ncols(), |i, j| mean[(i, j)] - half[j]);
    let hi = DMatrix::from_fn(mean.nrows(), mean.ncols(), |i, j| mean[(i, j)] + half[j]);
    Ok(Intervals { alpha, mean, lo, hi })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PointMetrics {
    pub mse: f64,
    pub mae: f64,
    pub r2: f64,
}

/// MSE, MAE and `R² = 1 − MSE / Var(y)` with `Var(y)` the mean per-coordinate variance.
pub fn point_metrics(pred: &DMatrix<f64>, y_true: &DMatrix<f64>) -> Result<PointMetrics> {
    if pred.shape() != y_true.shape() || y_true.is_empty() {
        return Err(PplsError::Dimension("prediction and truth shapes differ".into()));
    }
    let diff = pred - y_true;
    let mse = diff.map(|v| v * v).mean();
    let mae = diff.map(f64::abs).mean();
    let n = y_true.nrows() as f64;
    let var = y_true
        .column_iter()
        .map(|c| {
            let m = c.sum() / n;
            c.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n
        })
        .sum::<f64>()
        / y_true.ncols() as f64;
    let r2 = if var > 0.0 {
        1.0 - mse / var
    } else if mse == 0.0 {
        1.0
    } else {
        f64::NEG_INFINITY
    };
    Ok(PointMetrics { mse, mae, r2 })
}

/// Fraction of entries with `lo ≤ y ≤ hi`.
pub fn coverage(iv: &Intervals, y_true: &DMatrix<f64>) -> Result<f64> {
    if iv.lo.shape() != y_true.shape() {
        return Err(PplsError::Dimension("interval and truth shapes differ".into()));
    }
    let inside = y_true
        .iter()
        .zip(iv.lo.iter().zip(iv.hi.iter()))
        .filter(|(y, (lo, hi))| *lo <= *y && *y <= *hi)
        .count();
    Ok(inside as f64 / y_true.len() as f64)
}

/// Coverage per fold and `α`, with `ACE(α) = |mean coverage − (1 − α)|`.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationTable {
    pub alphas: Vec<f64>,
    /// `coverage[fold][k]` at `alphas[k]`.
    pub coverage: Vec<Vec<f64>>,
    pub ace: Vec<f64>,
}

impl CalibrationTable {
    pub fn new(alphas: Vec<f64>, coverage: Vec<Vec<f64>>) -> Self {
        let mut table = CalibrationTable {
            ace: Vec::new(),
            alphas,
            coverage,
        };
        table.ace = (0..table.alphas.len())
            .map(|k| (table.mean_coverage(k) - (1.0 - table.alphas[k])).abs())
            .collect();
        table
    }

    pub fn mean_coverage(&self, k: usize) -> f64 {
        self.coverage.iter().map(|f| f[k]).sum::<f64>() / self.coverage.len() as f64
    }

    /// Sample standard deviation across folds; zero for a single fold.
    pub fn sd_coverage(&self, k: usize) -> f64 {
        let n = self.coverage.len();
        if n < 2 {
            return 0.0;
        }
        let m = self.mean_coverage(k);
        (self.coverage.iter().map(|f| (f[k] - m).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
    }

    pub fn mean_ace(&self) -> f64 {
        self.ace.iter().sum::<f64>() / self.ace.len() as f64
    }
}

/// Point metrics and coverage on one evaluation fold.
#[derive(Debug, Clone, PartialEq)]
pub struct FoldEvaluation {
    pub metrics: PointMetrics,
    pub coverage: Vec<f64>,
}

pub fn evaluate(
    law: &PredictiveLaw,
    x: &DMatrix<f64>,
    y_true: &DMatrix<f64>,
    alphas: &[f64],
) -> Result<FoldEvaluation> {
    let mean = law.mean_rows(x)?;
    let metrics = point_metrics(&mean, y_true)?;
    let coverage = alphas
        .iter()
        .map(|&a| coverage(&intervals_from_mean(law, mean.clone(), a)?, y_true))
        .collect::<Result<Vec<_>>>()?;
    Ok(FoldEvaluation { metrics, coverage })
}

/// Shrinkage grid used for synthetic data.
pub const GAMMA_SYNTH: [f64; 10] = [0.5, 0.7, 0.85, 0.95, 1.0, 1.05, 1.15, 1.3, 1.5, 2.0];

#[derive(Debug, Clone, PartialEq)]
pub struct GammaSelection {
    pub gamma: f64,
    pub grid: Vec<f64>,
    pub cv_mse: Vec<f64>,
    /// `κ̂` pooled over the inner validation folds at the selected `γ`.
    pub kappa: f64,
}

/// Inner `K`-fold CV over `grid`. Each inner training split is refitted from
/// `params` with the noise variances held at their values in `params`; the
/// `γ` with least validation MSE wins, ties going to the smaller value.
pub fn select_gamma(
    params: &PplsParams,
    x_tr: &DMatrix<f64>,
    y_tr: &DMatrix<f64>,
    grid: &[f64],
    k_in: usize,
    cfg: &MultiStartConfig,
    rng: &RngStream,
) -> Result<GammaSelection> {
    let mut grid: Vec<f64> = grid.to_vec();
    grid.sort_by(f64::total_cmp);
    grid.dedup();
    if grid.is_empty() || grid.iter().any(|g| !(*g > 0.0)) {
        return Err(PplsError::Config("gamma grid must be nonempty and positive".into()));
    }
    let n = x_tr.nrows();
    let folds = kfold(n, k_in, &mut rng.clone())?;
    let mut sse = vec![0.0; grid.len()];
    let mut fold_laws = Vec::with_capacity(folds.len());
    for val in &folds {
        let train = complement(n, val);
        let (xt, yt) = (select_rows(x_tr, &train), select_rows(y_tr, &train));
        let mt = crate::model::sample_moments(&xt, &yt)?;
        let refit = fit(cfg.solver, params, &mt, &cfg.opts)?.params;
        let (xv, yv) = (select_rows(x_tr, val), select_rows(y_tr, val));
        for (k, &g) in grid.iter().enumerate() {
            let law = PredictiveLaw::from_moments(refit.clone(), g, &mt)?;
            sse[k] += (law.mean_rows(&xv)? - &yv).map(|v| v * v).sum();
        }
        fold_laws.push((refit, mt, xv, yv));
    }
    let denom = (n * y_tr.ncols()) as f64;
    let cv_mse: Vec<f64> = sse.iter().map(|s| s / denom).collect();
    let mut best = 0;
    for k in 1..grid.len() {
        if cv_mse[k] < cv_mse[best] {
            best = k;
        }
    }
    let gamma = grid[best];
    let mut qsum = 0.0;
    for (refit, mt, xv, yv) in fold_laws {
        let law = PredictiveLaw::from_moments(refit, gamma, &mt)?;
        qsum += law.quad_forms(&xv, &yv)?.iter().sum::<f64>();
    }
    Ok(GammaSelection {
        gamma,
        grid,
        cv_mse,
        kappa: qsum / denom,
    })
}
