//! End-to-end fitting: marginal transforms, noise pre-estimation, rank
//! selection, multi-start optimization and final canonical ordering.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rayon::prelude::*;

use crate::error::{PplsError, Result};
use crate::model::{reorder_components, symmetrize, PplsParams, SampleMoments, EPS_FLOOR};
use crate::normal::{norm_cdf, norm_quantile};
use crate::objective::scalar_nll;
use crate::predict::PredictiveLaw;
use crate::rng::RngStream;
use crate::solver::{fit, FitOptions, FitReport, SolverKind};
use crate::spectral::{
    conservative_estimate, descending_spectrum, noise_subspace_estimate, NoiseEstimate,
};
use crate::stiefel::{random_stiefel, StiefelPoint};

/// Initial `σ_h²` for every start.
pub const SIGMA_H2_INIT: f64 = 1e-2;

/// Coordinate-wise marginal transform.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Transform {
    Identity,
    Log1p,
    RankInt,
}

impl fmt::Display for Transform {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Transform::Identity => "none",
            Transform::Log1p => "log",
            Transform::RankInt => "rankint",
        })
    }
}

impl FromStr for Transform {
    type Err = PplsError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "none" | "identity" => Ok(Transform::Identity),
            "log" | "log1p" => Ok(Transform::Log1p),
            "rankint" | "rank_int" | "rank-int" => Ok(Transform::RankInt),
            other => Err(PplsError::Config(format!("unknown transform {other:?}"))),
        }
    }
}

/// A transform together with the training state needed to apply it to new
/// rows and to map back. For rank-INT the state is each column's sorted
/// training values.
#[derive(Debug, Clone, PartialEq)]
pub struct Gaussianizer {
    pub kind: Transform,
    pub sorted: Vec<Vec<f64>>,
}

impl Gaussianizer {
    pub fn fit(x: &DMatrix<f64>, kind: Transform) -> Result<Self> {
        check_finite(x)?;
        let sorted = match kind {
            Transform::RankInt => x
                .column_iter()
                .map(|c| {
                    let mut v: Vec<f64> = c.iter().copied().collect();
                    v.sort_by(f64::total_cmp);
                    v
                })
                .collect(),
            _ => Vec::new(),
        };
        if kind == Transform::Log1p {
            check_log_domain(x)?;
        }
        Ok(Gaussianizer { kind, sorted })
    }

    pub fn dim(&self) -> Option<usize> {
        match self.kind {
            Transform::RankInt => Some(self.sorted.len()),
            _ => None,
        }
    }

    /// Applies the fitted transform. Rank-INT scores a value by its average
    /// rank among the training values, so training rows map to
    /// `Φ⁻¹(rank / (N + 1))` exactly.
    pub fn transform(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        check_finite(x)?;
        match self.kind {
            Transform::Identity => Ok(x.clone()),
            Transform::Log1p => {
                check_log_domain(x)?;
                Ok(x.map(f64::ln_1p))
            }
            Transform::RankInt => {
                self.check_cols(x.ncols())?;
                Ok(DMatrix::from_fn(x.nrows(), x.ncols(), |i, j| {
                    rank_score(&self.sorted[j], x[(i, j)])
                }))
            }
        }
    }

    /// Approximate inverse. Rank-INT interpolates the training quantile
    /// function linearly and extrapolates by constants.
    pub fn inverse(&self, z: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        match self.kind {
            Transform::Identity => Ok(z.clone()),
            Transform::Log1p => Ok(z.map(f64::exp_m1)),
            Transform::RankInt => {
                self.check_cols(z.ncols())?;
                Ok(DMatrix::from_fn(z.nrows(), z.ncols(), |i, j| {
                    quantile_interp(&self.sorted[j], z[(i, j)])
                }))
            }
        }
    }

    fn check_cols(&self, d: usize) -> Result<()> {
        if d != self.sorted.len() {
            return Err(PplsError::Dimension(format!(
                "transform was fitted on {} columns, got {d}",
                self.sorted.len()
            )));
        }
        Ok(())
    }
}

/// Fits a transform on `x` and applies it.
pub fn gaussianize(x: &DMatrix<f64>, kind: Transform) -> Result<(DMatrix<f64>, Gaussianizer)> {
    let g = Gaussianizer::fit(x, kind)?;
    Ok((g.transform(x)?, g))
}

fn check_finite(x: &DMatrix<f64>) -> Result<()> {
    if let Some(k) = x.iter().position(|v| !v.is_finite()) {
        let (i, j) = (k % x.nrows(), k / x.nrows());
        return Err(PplsError::Input(format!(
            "non-finite entry at row {}, column {}",
            i + 1,
            j + 1
        )));
    }
    Ok(())
}

fn check_log_domain(x: &DMatrix<f64>) -> Result<()> {
    let bad: Vec<usize> = x
        .column_iter()
        .enumerate()
        .filter(|(_, c)| c.iter().any(|&v| v <= -1.0))
        .map(|(j, _)| j + 1)
        .collect();
    if !bad.is_empty() {
        return Err(PplsError::Input(format!(
            "log1p needs entries > -1; violated in columns {bad:?}"
        )));
    }
    Ok(())
}

fn rank_score(sorted: &[f64], z: f64) -> f64 {
    let lt = sorted.partition_point(|&v| v < z);
    let le = sorted.partition_point(|&v| v <= z);
    let rank = (lt + le + 1) as f64 / 2.0;
    norm_quantile(rank / (sorted.len() + 1) as f64)
}

fn quantile_interp(sorted: &[f64], z: f64) -> f64 {
    let n = sorted.len();
    let u = norm_cdf(z) * (n + 1) as f64;
    if !(u > 1.0) {
        return sorted[0];
    }
    if u >= n as f64 {
        return sorted[n - 1];
    }
    let k = u.floor() as usize;
    let t = u - k as f64;
    sorted[k - 1] * (1.0 - t) + sorted[k] * t
}

/// Free-parameter count `(p − r) r + (q − r) r + 2 r + 1`.
pub fn bic_dof(r: usize, p: usize, q: usize) -> usize {
    (p - r) * r + (q - r) * r + 2 * r + 1
}

/// `nll + d(r) ln N / N`. The objective is already scaled per sample.
pub fn bic_score(nll: f64, r: usize, p: usize, q: usize, n: usize) -> f64 {
    nll + bic_dof(r, p, q) as f64 * (n as f64).ln() / n as f64
}

/// Starting-point and solver settings shared by every fit in a run.
#[derive(Debug, Clone)]
pub struct MultiStartConfig {
    pub solver: SolverKind,
    pub starts: usize,
    pub warm_start: bool,
    pub opts: FitOptions,
    pub parallel: bool,
}

impl Default for MultiStartConfig {
    fn default() -> Self {
        MultiStartConfig {
            solver: SolverKind::Manifold,
            starts: 8,
            warm_start: true,
            opts: FitOptions::default(),
            parallel: false,
        }
    }
}

/// Loadings from the top singular pairs of `S_xy`, `Σ_t = B = I`,
/// `σ_h² = 10⁻²`, then `θ²_i = max(w_iᵀ S_xx w_i − σ_e², ε)`.
pub fn svd_warm_start(
    moments: &SampleMoments,
    r: usize,
    sigma_e2: f64,
    sigma_f2: f64,
) -> Result<PplsParams> {
    let (p, q) = (moments.p(), moments.q());
    if r == 0 || r >= p.min(q) {
        return Err(PplsError::Rank(format!("need 0 < r < min(p, q), got r = {r}")));
    }
    let svd = moments.sxy.clone().svd(true, true);
    let (u, vt) = match (svd.u, svd.v_t) {
        (Some(u), Some(vt)) => (u, vt),
        _ => return Err(PplsError::Numerical("SVD of S_xy failed".into())),
    };
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
    let top = svd.singular_values[order[0]];
    let rth = svd.singular_values[order[r - 1]];
    if !(top > 0.0) || rth <= 1e-10 * top {
        return Err(PplsError::DegenerateStart(format!(
            "S_xy has numerical rank below {r} (singular values {top:e} .. {rth:e})"
        )));
    }
    let mut w = DMatrix::zeros(p, r);
    let mut c = DMatrix::zeros(q, r);
    for (k, &j) in order.iter().take(r).enumerate() {
        w.set_column(k, &u.column(j));
        c.set_column(k, &vt.row(j).transpose());
        // Projected scores should covary positively.
        let cross = (w.column(k).transpose() * &moments.sxy * c.column(k))[0];
        if cross < 0.0 {
            let neg = -c.column(k);
            c.set_column(k, &neg);
        }
    }
    let w = StiefelPoint::orthonormalize(&w)?;
    let c = StiefelPoint::orthonormalize(&c)?;
    let theta = DVector::from_fn(r, |i, _| {
        let wi = w.matrix().column(i);
        ((wi.transpose() * &moments.sxx * wi)[0] - sigma_e2).max(EPS_FLOOR)
    });
    let params = PplsParams::new(
        w,
        c,
        DVector::from_element(r, 1.0),
        theta,
        sigma_e2,
        sigma_f2,
        SIGMA_H2_INIT,
    )?;
    Ok(reorder_components(&params))
}

/// Random feasible start with `Σ_t = B = I` and `σ_h² = 10⁻²`.
pub fn random_start(
    p: usize,
    q: usize,
    r: usize,
    sigma_e2: f64,
    sigma_f2: f64,
    rng: &mut RngStream,
) -> Result<PplsParams> {
    let w = random_stiefel(p, r, rng)?;
    let c = random_stiefel(q, r, rng)?;
    PplsParams::new(
        w,
        c,
        DVector::from_element(r, 1.0),
        DVector::from_element(r, 1.0),
        sigma_e2,
        sigma_f2,
        SIGMA_H2_INIT,
    )
}

/// Runs `cfg.starts` fits and keeps the lowest final objective. Start 0 is
/// the SVD warm start when enabled; start `k` otherwise draws from
/// `rng.child(k)`. Ties keep the lower start index.
pub fn multistart_fit(
    moments: &SampleMoments,
    r: usize,
    sigma_e2: f64,
    sigma_f2: f64,
    cfg: &MultiStartConfig,
    rng: &RngStream,
) -> Result<FitReport> {
    if cfg.starts == 0 {
        return Err(PplsError::Config("need at least one start".into()));
    }
    let run = |k: usize| -> Result<FitReport> {
        let init = if k == 0 && cfg.warm_start {
            svd_warm_start(moments, r, sigma_e2, sigma_f2)?
        } else {
            let mut child = rng.child(k as u64);
            random_start(moments.p(), moments.q(), r, sigma_e2, sigma_f2, &mut child)?
        };
        let mut rep = fit(cfg.solver, &init, moments, &cfg.opts)?;
        rep.start_index = Some(k);
        Ok(rep)
    };
    let results: Vec<Result<FitReport>> = if cfg.parallel {
        (0..cfg.starts).into_par_iter().map(run).collect()
    } else {
        (0..cfg.starts).map(run).collect()
    };
    let mut best: Option<FitReport> = None;
    let mut failures = Vec::new();
    for (k, res) in results.into_iter().enumerate() {
        match res {
            Ok(rep) => {
                let better = best
                    .as_ref()
                    .is_none_or(|b| rep.final_objective() < b.final_objective());
                if better {
                    best = Some(rep);
                }
            }
            Err(e) => failures.push(format!("start {k}: {e}")),
        }
    }
    match best {
        Some(mut rep) => {
            rep.params = reorder_components(&rep.params);
            Ok(rep)
        }
        None => Err(PplsError::AllStartsFailed {
            starts: cfg.starts,
            diagnostics: failures.join("; "),
        }),
    }
}

/// Rank-selection criterion.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Criterion {
    Bic,
    CvNll,
    CvMse,
    Gap,
}

impl fmt::Display for Criterion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Criterion::Bic => "bic",
            Criterion::CvNll => "cvnll",
            Criterion::CvMse => "cvmse",
            Criterion::Gap => "gap",
        })
    }
}

impl FromStr for Criterion {
    type Err = PplsError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().replace(['-', '_'], "").as_str() {
            "bic" => Ok(Criterion::Bic),
            "cvnll" => Ok(Criterion::CvNll),
            "cvmse" => Ok(Criterion::CvMse),
            "gap" | "eigengap" => Ok(Criterion::Gap),
            other => Err(PplsError::Config(format!("unknown criterion {other:?}"))),
        }
    }
}

/// How noise variances are fixed for each candidate rank. `V1` uses one
/// conservative estimate from `r_max`; `V2` re-estimates at each rank.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RankNoise {
    V1,
    V2,
}

impl fmt::Display for RankNoise {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RankNoise::V1 => "v1",
            RankNoise::V2 => "v2",
        })
    }
}

impl FromStr for RankNoise {
    type Err = PplsError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "v1" => Ok(RankNoise::V1),
            "v2" => Ok(RankNoise::V2),
            other => Err(PplsError::Config(format!("unknown noise mode {other:?}"))),
        }
    }
}

/// Noise variances for rank `r`.
pub fn noise_for_rank(
    moments: &SampleMoments,
    r: usize,
    mode: RankNoise,
    r_max: usize,
) -> Result<(NoiseEstimate, NoiseEstimate)> {
    match mode {
        RankNoise::V1 => Ok((
            conservative_estimate(&moments.sxx, r_max)?,
            conservative_estimate(&moments.syy, r_max)?,
        )),
        RankNoise::V2 => Ok((
            noise_subspace_estimate(&moments.sxx, r)?,
            noise_subspace_estimate(&moments.syy, r)?,
        )),
    }
}

/// Shuffled partition of `0..n` into `k` folds; indices are sorted within a fold.
pub fn kfold(n: usize, k: usize, rng: &mut RngStream) -> Result<Vec<Vec<usize>>> {
    if k < 2 || k > n {
        return Err(PplsError::Config(format!("need 2 <= K <= N, got K = {k}, N = {n}")));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    let mut folds = vec![Vec::new(); k];
    for (pos, &i) in idx.iter().enumerate() {
        folds[pos % k].push(i);
    }
    for f in folds.iter_mut() {
        f.sort_unstable();
    }
    Ok(folds)
}

/// Row indices not in `fold`.
pub fn complement(n: usize, fold: &[usize]) -> Vec<usize> {
    let mut mask = vec![true; n];
    for &i in fold {
        mask[i] = false;
    }
    (0..n).filter(|&i| mask[i]).collect()
}

pub fn select_rows(x: &DMatrix<f64>, rows: &[usize]) -> DMatrix<f64> {
    x.select_rows(rows.iter())
}

/// Second moments of `(x, y)` about the given means, with `1/N` normalization.
pub fn moments_about(
    x: &DMatrix<f64>,
    y: &DMatrix<f64>,
    mean_x: &DVector<f64>,
    mean_y: &DVector<f64>,
) -> Result<SampleMoments> {
    let n = x.nrows();
    if y.nrows() != n || n == 0 {
        return Err(PplsError::Dimension(format!(
            "X has {n} rows but Y has {}",
            y.nrows()
        )));
    }
    let xc = shift_rows(x, mean_x);
    let yc = shift_rows(y, mean_y);
    let inv = 1.0 / n as f64;
    Ok(SampleMoments {
        sxx: symmetrize(xc.tr_mul(&xc) * inv),
        syy: symmetrize(yc.tr_mul(&yc) * inv),
        sxy: xc.tr_mul(&yc) * inv,
        n,
        mean_x: mean_x.clone(),
        mean_y: mean_y.clone(),
    })
}

pub(crate) fn shift_rows(x: &DMatrix<f64>, mean: &DVector<f64>) -> DMatrix<f64> {
    let mut out = x.clone();
    for (j, mut col) in out.column_iter_mut().enumerate() {
        col.add_scalar_mut(-mean[j]);
    }
    out
}

/// Cross-validated scores at one rank.
#[derive(Debug, Clone, PartialEq)]
pub struct CvScores {
    pub nll: f64,
    pub mse: f64,
    pub fold_nll: Vec<f64>,
    pub fold_mse: Vec<f64>,
}

/// CV-NLL and CV-MSE at rank `r`. Centering, noise estimates and fits use
/// training rows only; CV-MSE uses the predictive mean with `γ = 1`.
#[allow(clippy::too_many_arguments)]
pub fn cv_scores(
    x: &DMatrix<f64>,
    y: &DMatrix<f64>,
    r: usize,
    folds: &[Vec<usize>],
    mode: RankNoise,
    r_max: usize,
    cfg: &MultiStartConfig,
    rng: &RngStream,
) -> Result<CvScores> {
    let n = x.nrows();
    if folds.len() < 2 {
        return Err(PplsError::Config("need at least two folds".into()));
    }
    let mut fold_nll = Vec::with_capacity(folds.len());
    let mut fold_mse = Vec::with_capacity(folds.len());
    for (k, val) in folds.iter().enumerate() {
        let train = complement(n, val);
        if val.len() <= r || train.len() <= r {
            return Err(PplsError::Config(format!(
                "fold {k} is too small for rank {r} ({} validation, {} training rows)",
                val.len(),
                train.len()
            )));
        }
        let (xt, yt) = (select_rows(x, &train), select_rows(y, &train));
        let mt = crate::model::sample_moments(&xt, &yt)?;
        let (ne, nf) = noise_for_rank(&mt, r, mode, r_max)?;
        let rep = multistart_fit(&mt, r, ne.value, nf.value, cfg, &rng.child(k as u64))?;
        let (xv, yv) = (select_rows(x, val), select_rows(y, val));
        let mv = moments_about(&xv, &yv, &mt.mean_x, &mt.mean_y)?;
        fold_nll.push(scalar_nll(&rep.params, &mv)?);
        let law = PredictiveLaw::new(rep.params, 1.0, mt.mean_x.clone(), mt.mean_y.clone())?;
        let pred = law.mean_rows(&xv)?;
        fold_mse.push((pred - yv).map(|v| v * v).mean());
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    Ok(CvScores {
        nll: mean(&fold_nll),
        mse: mean(&fold_mse),
        fold_nll,
        fold_mse,
    })
}

#[derive(Debug, Clone)]
pub struct RankSelectConfig {
    pub grid: Vec<usize>,
    pub r_max: usize,
    pub criteria: Vec<Criterion>,
    pub mode: RankNoise,
    pub k_out: usize,
    pub start: MultiStartConfig,
}

/// Scores for one criterion over the grid. Failed ranks hold NaN.
#[derive(Debug, Clone, PartialEq)]
pub struct CriterionScores {
    pub criterion: Criterion,
    pub scores: Vec<f64>,
    pub selected: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RankSelectionResult {
    pub grid: Vec<usize>,
    pub mode: RankNoise,
    pub criteria: Vec<CriterionScores>,
    /// `(σ̂_e², σ̂_f²)` used at each grid rank.
    pub noise: Vec<(f64, f64)>,
    /// Ranks whose fit failed, with the error text.
    pub failures: Vec<(usize, String)>,
}

impl RankSelectionResult {
    pub fn selected(&self, c: Criterion) -> Option<usize> {
        self.criteria.iter().find(|s| s.criterion == c).map(|s| s.selected)
    }
}

/// Scores every rank in the grid under each requested criterion and picks
/// the argmin, breaking ties toward the smaller rank. The gap criterion
/// scores `−(λ_k − λ_{k+1})` on the spectrum of `S_xx`.
pub fn rank_select(
    x: &DMatrix<f64>,
    y: &DMatrix<f64>,
    cfg: &RankSelectConfig,
    rng: &RngStream,
) -> Result<RankSelectionResult> {
    let (p, q) = (x.ncols(), y.ncols());
    let mut grid = cfg.grid.clone();
    grid.sort_unstable();
    grid.dedup();
    if grid.is_empty() || grid[0] == 0 || cfg.criteria.is_empty() {
        return Err(PplsError::Config("rank grid and criteria must be nonempty, ranks >= 1".into()));
    }
    if cfg.r_max >= p.min(q) || grid.last().is_some_and(|&r| r > cfg.r_max) {
        return Err(PplsError::Config(format!(
            "need grid <= r_max < min(p, q) = {}, got r_max = {}",
            p.min(q),
            cfg.r_max
        )));
    }
    let moments = crate::model::sample_moments(x, y)?;
    let n = moments.n;
    let want = |c: Criterion| cfg.criteria.contains(&c);
    let need_cv = want(Criterion::CvNll) || want(Criterion::CvMse);
    let folds = if need_cv {
        kfold(n, cfg.k_out, &mut rng.child(u64::MAX))?
    } else {
        Vec::new()
    };

    let per_rank = |r: usize| -> (Result<f64>, Result<CvScores>, Result<(f64, f64)>) {
        let noise = noise_for_rank(&moments, r, cfg.mode, cfg.r_max).map(|(e, f)| (e.value, f.value));
        let bic = if want(Criterion::Bic) {
            noise.as_ref().map_err(clone_err).and_then(|&(se, sf)| {
                let rep = multistart_fit(&moments, r, se, sf, &cfg.start, &rng.child(2 * r as u64))?;
                Ok(bic_score(rep.final_objective(), r, p, q, n))
            })
        } else {
            Ok(f64::NAN)
        };
        let cv = if need_cv {
            cv_scores(x, y, r, &folds, cfg.mode, cfg.r_max, &cfg.start, &rng.child(2 * r as u64 + 1))
        } else {
            Ok(CvScores {
                nll: f64::NAN,
                mse: f64::NAN,
                fold_nll: Vec::new(),
                fold_mse: Vec::new(),
            })
        };
        (bic, cv, noise)
    };
    let results: Vec<_> = if cfg.start.parallel {
        grid.par_iter().map(|&r| per_rank(r)).collect()
    } else {
        grid.iter().map(|&r| per_rank(r)).collect()
    };

    let mut failures = Vec::new();
    let mut bic = Vec::new();
    let mut cvnll = Vec::new();
    let mut cvmse = Vec::new();
    let mut noise = Vec::new();
    for (&r, (b, cv, nz)) in grid.iter().zip(results) {
        let mut fail = |e: PplsError| {
            failures.push((r, e.to_string()));
            f64::NAN
        };
        noise.push(nz.unwrap_or((f64::NAN, f64::NAN)));
        bic.push(b.unwrap_or_else(&mut fail));
        match cv {
            Ok(s) => {
                cvnll.push(s.nll);
                cvmse.push(s.mse);
            }
            Err(e) => {
                fail(e);
                cvnll.push(f64::NAN);
                cvmse.push(f64::NAN);
            }
        }
    }
    failures.dedup_by(|a, b| a.0 == b.0 && a.1 == b.1);

    let mut criteria = Vec::new();
    for &c in &cfg.criteria {
        let scores = match c {
            Criterion::Bic => bic.clone(),
            Criterion::CvNll => cvnll.clone(),
            Criterion::CvMse => cvmse.clone(),
            Criterion::Gap => {
                let spec = descending_spectrum(&moments.sxx)?;
                grid.iter().map(|&k| -(spec[k - 1] - spec[k])).collect()
            }
        };
        let selected = argmin_rank(&grid, &scores).ok_or_else(|| {
            PplsError::Numerical(format!("criterion {c} failed at every rank"))
        })?;
        criteria.push(CriterionScores {
            criterion: c,
            scores,
            selected,
        });
    }
    Ok(RankSelectionResult {
        grid,
        mode: cfg.mode,
        criteria,
        noise,
        failures,
    })
}

fn clone_err(e: &PplsError) -> PplsError {
    PplsError::Numerical(e.to_string())
}

/// Smallest rank attaining the minimum finite score.
fn argmin_rank(grid: &[usize], scores: &[f64]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (&r, &s) in grid.iter().zip(scores) {
        if s.is_finite() && best.is_none_or(|(_, b)| s < b) {
            best = Some((r, s));
        }
    }
    best.map(|(r, _)| r)
}

#[derive(Debug, Clone)]
pub enum RankChoice {
    Fixed(usize),
    Auto(RankSelectConfig),
}

#[derive(Debug, Clone)]
pub struct PipelineConfig {
    pub transform: Transform,
    pub rank: RankChoice,
    /// Noise mode for the final fit; with a fixed rank `V1` falls back to `V2`.
    pub noise_mode: RankNoise,
    pub start: MultiStartConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            transform: Transform::Identity,
            rank: RankChoice::Fixed(1),
            noise_mode: RankNoise::V2,
            start: MultiStartConfig::default(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct PipelineFit {
    pub params: PplsParams,
    pub report: FitReport,
    pub moments: SampleMoments,
    pub noise_x: NoiseEstimate,
    pub noise_y: NoiseEstimate,
    pub transform_x: Gaussianizer,
    pub transform_y: Gaussianizer,
    pub rank_selection: Option<RankSelectionResult>,
}

/// Transforms, chooses the rank, fixes the noise variances and runs the
/// multi-start fit.
pub fn fit_pipeline(
    x: &DMatrix<f64>,
    y: &DMatrix<f64>,
    cfg: &PipelineConfig,
    rng: &RngStream,
) -> Result<PipelineFit> {
    let (xt, gx) = gaussianize(x, cfg.transform)?;
    let (yt, gy) = gaussianize(y, cfg.transform)?;
    let moments = crate::model::sample_moments(&xt, &yt)?;
    let (r, selection, mode, r_max) = match &cfg.rank {
        RankChoice::Fixed(r) => (*r, None, RankNoise::V2, *r),
        RankChoice::Auto(rs) => {
            let sel = rank_select(&xt, &yt, rs, &rng.child(1))?;
            let first = rs.criteria[0];
            let r = sel.selected(first).expect("criterion was scored");
            (r, Some(sel), cfg.noise_mode, rs.r_max)
        }
    };
    let (noise_x, noise_y) = noise_for_rank(&moments, r, mode, r_max)?;
    let report = multistart_fit(&moments, r, noise_x.value, noise_y.value, &cfg.start, &rng.child(0))?;
    Ok(PipelineFit {
        params: report.params.clone(),
        report,
        moments,
        noise_x,
        noise_y,
        transform_x: gx,
        transform_y: gy,
        rank_selection: selection,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{sample_dataset, NoiseLaw};
    use crate::testutil::random_instance;

    #[test]
    fn rank_int_small_column() {
        let x = DMatrix::from_column_slice(3, 1, &[5.0, -1.0, 2.0]);
        let (z, _) = gaussianize(&x, Transform::RankInt).unwrap();
        assert_eq!(z[(0, 0)], norm_quantile(0.75));
        assert_eq!(z[(1, 0)], norm_quantile(0.25));
        assert_eq!(z[(2, 0)], 0.0);
        assert!((z[(0, 0)] - 0.674_490).abs() < 1e-6);
    }

    #[test]
    fn rank_int_ties_and_idempotence() {
        let x = DMatrix::from_column_slice(5, 1, &[1.0, 3.0, 3.0, 0.0, 7.0]);
        let (z, _) = gaussianize(&x, Transform::RankInt).unwrap();
        assert_eq!(z[(1, 0)], z[(2, 0)]);
        assert_eq!(z[(1, 0)], norm_quantile(3.5 / 6.0));
        let (z2, _) = gaussianize(&z, Transform::RankInt).unwrap();
        assert_eq!(z, z2);
        let distinct = DMatrix::from_column_slice(6, 1, &[0.3, -2.0, 9.0, 1.5, 4.0, -0.1]);
        assert!(gaussianize(&distinct, Transform::RankInt).unwrap().0.mean().abs() < 1e-15);
    }

    #[test]
    fn rank_int_inverse_interpolates_and_clamps() {
        let x = DMatrix::from_column_slice(4, 1, &[10.0, 20.0, 30.0, 40.0]);
        let (z, g) = gaussianize(&x, Transform::RankInt).unwrap();
        let back = g.inverse(&z).unwrap();
        for i in 0..4 {
            assert!((back[(i, 0)] - x[(i, 0)]).abs() < 1e-9);
        }
        let ext = g.inverse(&DMatrix::from_column_slice(2, 1, &[-9.0, 9.0])).unwrap();
        assert_eq!(ext[(0, 0)], 10.0);
        assert_eq!(ext[(1, 0)], 40.0);
    }

    #[test]
    fn identity_and_log_domain() {
        let x = DMatrix::from_row_slice(2, 2, &[0.5, -2.0, 1.0, 3.0]);
        assert_eq!(gaussianize(&x, Transform::Identity).unwrap().0, x);
        let err = gaussianize(&x, Transform::Log1p).unwrap_err();
        assert!(err.to_string().contains("[2]"), "{err}");
    }

    #[test]
    fn bic_dof_formula() {
        assert_eq!(bic_dof(5, 200, 200), 1961);
        for r in 1..49 {
            if bic_dof(r + 1, 50, 50) > bic_dof(r, 50, 50) {
                assert!(bic_score(3.0, r + 1, 50, 50, 1000) > bic_score(3.0, r, 50, 50, 1000));
            }
        }
    }

    #[test]
    fn warm_start_recovers_noiseless_span() {
        let (truth, _) = random_instance(12, 10, 3, 7);
        let mut m = SampleMoments::population(&truth, 100);
        m.sxx -= DMatrix::identity(12, 12) * truth.sigma_e2;
        m.syy -= DMatrix::identity(10, 10) * truth.sigma_f2;
        let ws = svd_warm_start(&m, 3, truth.sigma_e2, truth.sigma_f2).unwrap();
        let w0 = truth.w.matrix();
        let resid = ws.w.matrix() - w0 * (w0.transpose() * ws.w.matrix());
        assert!(resid.norm() < 1e-8);
        let zero = SampleMoments {
            sxy: DMatrix::zeros(12, 10),
            ..m
        };
        assert!(matches!(
            svd_warm_start(&zero, 3, 0.1, 0.1),
            Err(PplsError::DegenerateStart(_))
        ));
    }

    #[test]
    fn multistart_is_deterministic_and_best() {
        let (truth, _) = random_instance(10, 9, 2, 3);
        let (x, y) = sample_dataset(&truth, 300, &NoiseLaw::Gaussian, &mut RngStream::new(1, 0)).unwrap();
        let m = crate::model::sample_moments(&x, &y).unwrap();
        let cfg = MultiStartConfig {
            starts: 3,
            ..Default::default()
        };
        let rng = RngStream::new(5, 0);
        let a = multistart_fit(&m, 2, truth.sigma_e2, truth.sigma_f2, &cfg, &rng).unwrap();
        let b = multistart_fit(&m, 2, truth.sigma_e2, truth.sigma_f2, &cfg, &rng).unwrap();
        assert_eq!(a.params, b.params);
        for k in 0..3 {
            let single = MultiStartConfig {
                starts: 1,
                warm_start: k == 0,
                ..cfg.clone()
            };
            let rep = if k == 0 {
                multistart_fit(&m, 2, truth.sigma_e2, truth.sigma_f2, &single, &rng).unwrap()
            } else {
                let mut child = rng.child(k as u64);
                let init = random_start(10, 9, 2, truth.sigma_e2, truth.sigma_f2, &mut child).unwrap();
                fit(cfg.solver, &init, &m, &cfg.opts).unwrap()
            };
            assert!(a.final_objective() <= rep.final_objective());
        }
    }

    #[test]
    fn kfold_partitions_rows() {
        let folds = kfold(23, 5, &mut RngStream::new(2, 0)).unwrap();
        let mut all: Vec<usize> = folds.concat();
        all.sort_unstable();
        assert_eq!(all, (0..23).collect::<Vec<_>>());
        assert!(folds.iter().all(|f| f.len() == 4 || f.len() == 5));
    }

    #[test]
    fn rank_select_single_rank_grid() {
        let (truth, _) = random_instance(10, 9, 2, 11);
        let (x, y) = sample_dataset(&truth, 200, &NoiseLaw::Gaussian, &mut RngStream::new(3, 0)).unwrap();
        let cfg = RankSelectConfig {
            grid: vec![2],
            r_max: 4,
            criteria: vec![Criterion::Bic, Criterion::CvNll, Criterion::Gap],
            mode: RankNoise::V1,
            k_out: 3,
            start: MultiStartConfig {
                starts: 2,
                ..Default::default()
            },
        };
        let res = rank_select(&x, &y, &cfg, &RngStream::new(4, 0)).unwrap();
        for c in &res.criteria {
            assert_eq!(c.selected, 2);
            assert!(c.scores.iter().all(|s| s.is_finite()));
        }
    }

    #[test]
    fn fold_too_small_is_config_error() {
        let (truth, _) = random_instance(10, 9, 2, 12);
        let (x, y) = sample_dataset(&truth, 9, &NoiseLaw::Gaussian, &mut RngStream::new(3, 0)).unwrap();
        let folds = kfold(9, 5, &mut RngStream::new(1, 0)).unwrap();
        let err = cv_scores(&x, &y, 2, &folds, RankNoise::V2, 2, &MultiStartConfig::default(), &RngStream::new(1, 1));
        assert!(matches!(err, Err(PplsError::Config(_))));
    }
}
