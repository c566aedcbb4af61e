//! Seeded Monte-Carlo studies on synthetic data with long and wide CSV output.

use std::collections::BTreeMap;
use std::fmt;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::error::{PplsError, Result};
use crate::model::{reorder_components, sample_dataset, sample_moments, scale_columns, NoiseLaw, PplsParams};
use crate::pipeline::{
    complement, gaussianize, multistart_fit, noise_for_rank, rank_select, select_rows, Criterion,
    MultiStartConfig, RankNoise, RankSelectConfig, Transform,
};
use crate::predict::{evaluate, select_gamma, CalibrationTable, PredictiveLaw, GAMMA_SYNTH};
use crate::rng::RngStream;
use crate::solver::{FitOptions, SolverKind};
use crate::spectral::{full_spectrum_estimate, noise_subspace_estimate};
use crate::stiefel::{random_stiefel, StiefelPoint};

/// Low-noise regime `(σ_e², σ_f², σ_h²)`.
pub const LOW_NOISE: (f64, f64, f64) = (0.1, 0.1, 0.05);
/// High-noise regime `(σ_e², σ_f², σ_h²)`.
pub const HIGH_NOISE: (f64, f64, f64) = (0.5, 0.5, 0.25);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum StudyKind {
    PpcaVerify,
    BiasFloor,
    SignalSweep,
    Recovery,
    Calibration,
    RankSelection,
    NonGaussian,
}

impl StudyKind {
    pub const ALL: [StudyKind; 7] = [
        StudyKind::PpcaVerify,
        StudyKind::BiasFloor,
        StudyKind::SignalSweep,
        StudyKind::Recovery,
        StudyKind::Calibration,
        StudyKind::RankSelection,
        StudyKind::NonGaussian,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            StudyKind::PpcaVerify => "ppca-verify",
            StudyKind::BiasFloor => "bias-floor",
            StudyKind::SignalSweep => "signal-sweep",
            StudyKind::Recovery => "recovery",
            StudyKind::Calibration => "calibration",
            StudyKind::RankSelection => "rank-selection",
            StudyKind::NonGaussian => "non-gaussian",
        }
    }
}

impl fmt::Display for StudyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for StudyKind {
    type Err = PplsError;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim().to_ascii_lowercase().replace('_', "-");
        StudyKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| PplsError::Config(format!("unknown study {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StudyConfig {
    pub kind: StudyKind,
    pub p: usize,
    pub q: usize,
    pub r: usize,
    /// Sample sizes; most studies use the first entry only.
    pub n: Vec<usize>,
    /// `(σ_e², σ_f², σ_h²)`.
    pub noise: (f64, f64, f64),
    /// Signal variances `θ²`; `None` means linearly spaced from 2.0 down to 1.2.
    pub theta: Option<Vec<f64>>,
    pub trials: usize,
    pub seed: u64,
    pub solvers: Vec<SolverKind>,
    pub starts: usize,
    pub signals: Vec<f64>,
    pub folds: usize,
    pub inner_folds: usize,
    pub alphas: Vec<f64>,
    pub gamma_grid: Vec<f64>,
    pub rank_grid: Vec<usize>,
    pub noise_law: NoiseLaw,
    pub parallel: bool,
    pub full: bool,
}

impl StudyConfig {
    /// Desk-scale defaults, or the larger dimensions when `full` is set.
    pub fn defaults(kind: StudyKind, full: bool) -> Self {
        let big = |desk: usize, large: usize| if full { large } else { desk };
        let mut c = StudyConfig {
            kind,
            p: big(50, 200),
            q: big(50, 200),
            r: 5,
            n: vec![2000],
            noise: LOW_NOISE,
            theta: None,
            trials: 10,
            seed: 42,
            solvers: vec![SolverKind::Manifold],
            starts: 8,
            signals: vec![1.0, 2.0, 5.0, 10.0, 20.0],
            folds: 5,
            inner_folds: 5,
            alphas: vec![0.05, 0.10, 0.15, 0.20, 0.25],
            gamma_grid: GAMMA_SYNTH.to_vec(),
            rank_grid: (1..=8).collect(),
            noise_law: NoiseLaw::Gaussian,
            parallel: false,
            full,
        };
        match kind {
            StudyKind::PpcaVerify => {
                c.p = 20;
                c.q = 20;
                c.r = 3;
                c.n = vec![500];
                c.noise = (0.1, 0.1, 0.0);
                c.trials = 20;
            }
            StudyKind::BiasFloor => {
                c.p = 50;
                c.q = 50;
                c.noise = (0.5, 0.5, 0.0);
                c.theta = Some(vec![2.0, 1.8, 1.6, 1.4, 1.2]);
                c.n = vec![500, 2000, 10000];
                c.trials = 100;
            }
            StudyKind::SignalSweep => {
                c.p = 60;
                c.q = 60;
                c.noise = (0.5, 0.5, 0.0);
                c.trials = 40;
            }
            StudyKind::Recovery => {
                c.r = big(3, 5);
                c.n = vec![500, 4000];
                c.solvers = vec![SolverKind::Manifold, SolverKind::Bcd];
            }
            StudyKind::Calibration => {
                c.n = vec![1000];
                c.trials = 2;
            }
            StudyKind::RankSelection => {}
            StudyKind::NonGaussian => {
                c.n = vec![1000];
                c.trials = 2;
                c.noise_law = NoiseLaw::StudentT { nu: 5.0 };
            }
        }
        c
    }

    /// Defaults for the study named by the `study` key, overridden by the
    /// remaining `key = value` lines. `#` starts a comment.
    pub fn parse(text: &str, full: bool) -> Result<Self> {
        let mut pairs = Vec::new();
        for (k, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                PplsError::Parse(format!("config line {}: expected key = value", k + 1))
            })?;
            pairs.push((k + 1, key.trim().to_ascii_lowercase(), value.trim().to_string()));
        }
        let kind = pairs
            .iter()
            .find(|(_, k, _)| k == "study")
            .map(|(_, _, v)| v.parse())
            .transpose()?
            .ok_or_else(|| PplsError::Config("config needs a `study` key".into()))?;
        let mut full = full;
        if let Some((_, _, v)) = pairs.iter().find(|(_, k, _)| k == "full") {
            full = parse_bool(v)?;
        }
        let mut c = StudyConfig::defaults(kind, full);
        for (line, key, value) in &pairs {
            c.set(key, value).map_err(|e| PplsError::Config(format!("config line {line}: {e}")))?;
        }
        c.validate()?;
        Ok(c)
    }

    /// Applies one `key = value` override.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "study" | "full" => {}
            "p" => self.p = parse_num(value)?,
            "q" => self.q = parse_num(value)?,
            "r" => self.r = parse_num(value)?,
            "n" => self.n = parse_list(value)?,
            "trials" | "m" => self.trials = parse_num(value)?,
            "seed" => self.seed = parse_num(value)?,
            "solver" | "solvers" => self.solvers = parse_list(value)?,
            "starts" => self.starts = parse_num(value)?,
            "signals" => self.signals = parse_list(value)?,
            "folds" => self.folds = parse_num(value)?,
            "inner_folds" => self.inner_folds = parse_num(value)?,
            "alphas" => self.alphas = parse_list(value)?,
            "gamma_grid" => self.gamma_grid = parse_list(value)?,
            "rank_grid" => self.rank_grid = parse_range(value)?,
            "noise_law" => self.noise_law = value.parse()?,
            "parallel" => self.parallel = parse_bool(value)?,
            "theta" => self.theta = Some(parse_list(value)?),
            "sigma_e2" => self.noise.0 = parse_num(value)?,
            "sigma_f2" => self.noise.1 = parse_num(value)?,
            "sigma_h2" => self.noise.2 = parse_num(value)?,
            "noise" => {
                self.noise = match value.trim().to_ascii_lowercase().as_str() {
                    "low" => LOW_NOISE,
                    "high" => HIGH_NOISE,
                    other => {
                        let v: Vec<f64> = parse_list(other)?;
                        if v.len() != 3 {
                            return Err(PplsError::Config("noise needs low, high or three values".into()));
                        }
                        (v[0], v[1], v[2])
                    }
                }
            }
            other => return Err(PplsError::Config(format!("unknown key {other:?}"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let (se, sf, sh) = self.noise;
        if self.p == 0 || self.q == 0 || self.r == 0 || self.trials == 0 || self.n.is_empty() {
            return Err(PplsError::Config("dimensions, trials and sample sizes must be positive".into()));
        }
        if self.r >= self.p.min(self.q) {
            return Err(PplsError::Config(format!("need r < min(p, q), got r = {}", self.r)));
        }
        if !(se > 0.0 && sf > 0.0 && sh >= 0.0) {
            return Err(PplsError::Config("noise variances must be positive".into()));
        }
        if self.n.iter().any(|&n| n < 2) || self.solvers.is_empty() || self.starts == 0 {
            return Err(PplsError::Config("need N >= 2, a solver and at least one start".into()));
        }
        if let Some(t) = &self.theta {
            if t.len() != self.r || t.iter().any(|v| !(*v > 0.0)) {
                return Err(PplsError::Config(format!("theta needs {} positive values", self.r)));
            }
        }
        if self.alphas.iter().any(|a| !(*a > 0.0 && *a < 1.0)) {
            return Err(PplsError::Config("alphas must lie in (0, 1)".into()));
        }
        self.noise_law.validate()
    }

    fn theta(&self) -> DVector<f64> {
        match &self.theta {
            Some(t) => DVector::from_column_slice(t),
            None => linspace(2.0, 1.2, self.r),
        }
    }

    fn start_config(&self, solver: SolverKind) -> MultiStartConfig {
        MultiStartConfig {
            solver,
            starts: self.starts,
            warm_start: true,
            opts: FitOptions::default(),
            parallel: false,
        }
    }
}

fn parse_num<T: FromStr>(v: &str) -> Result<T> {
    v.trim()
        .parse()
        .map_err(|_| PplsError::Parse(format!("cannot parse {v:?}")))
}

fn parse_bool(v: &str) -> Result<bool> {
    match v.trim().to_ascii_lowercase().as_str() {
        "true" | "yes" | "1" | "on" => Ok(true),
        "false" | "no" | "0" | "off" => Ok(false),
        other => Err(PplsError::Parse(format!("expected a boolean, got {other:?}"))),
    }
}

fn parse_list<T: FromStr>(v: &str) -> Result<Vec<T>> {
    v.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse().map_err(|_| PplsError::Parse(format!("cannot parse {s:?}"))))
        .collect()
}

/// `a..b` (inclusive) or a comma list.
pub fn parse_range(v: &str) -> Result<Vec<usize>> {
    if let Some((a, b)) = v.split_once("..") {
        let (a, b): (usize, usize) = (parse_num(a)?, parse_num(b.trim_start_matches('='))?);
        if a > b {
            return Err(PplsError::Parse(format!("empty range {v:?}")));
        }
        Ok((a..=b).collect())
    } else {
        parse_list(v)
    }
}

/// `r` points from `a` to `b` inclusive.
pub fn linspace(a: f64, b: f64, r: usize) -> DVector<f64> {
    DVector::from_fn(r, |i, _| {
        if r == 1 {
            a
        } else {
            a + (b - a) * i as f64 / (r - 1) as f64
        }
    })
}

/// Ground truth: random orthonormal loadings, `θ²` from `theta`, `b` spaced
/// from 1.2 down to 0.8, reordered into canonical form.
pub fn synthetic_truth(
    p: usize,
    q: usize,
    theta: &DVector<f64>,
    noise: (f64, f64, f64),
    rng: &mut RngStream,
) -> Result<PplsParams> {
    let r = theta.len();
    let w = random_stiefel(p, r, rng)?;
    let c = random_stiefel(q, r, rng)?;
    let params = PplsParams::new(w, c, linspace(1.2, 0.8, r), theta.clone(), noise.0, noise.1, noise.2)?;
    Ok(reorder_components(&params))
}

/// Single-view rows `x = t Wᵀ + e` with `t ~ N(0, diag θ²)` and Gaussian `e`.
pub fn sample_view(
    w: &StiefelPoint,
    theta: &DVector<f64>,
    sigma2: f64,
    n: usize,
    rng: &mut RngStream,
) -> DMatrix<f64> {
    let (p, r) = (w.p(), w.r());
    let z = DMatrix::from_fn(n, r, |_, _| <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng));
    let t = scale_columns(&z, &theta.map(f64::sqrt));
    let sd = sigma2.sqrt();
    let e = DMatrix::from_fn(n, p, |_, _| sd * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng));
    t * w.matrix().transpose() + e
}

/// Tipping–Bishop noise MLE from the singular values of the centered data:
/// the discarded share of `‖X_c‖²_F / N` averaged over `p − r` directions.
pub fn tipping_bishop_sigma2(x: &DMatrix<f64>, r: usize) -> Result<f64> {
    let (n, p) = x.shape();
    if r >= p {
        return Err(PplsError::Rank(format!("need r < p, got r = {r}, p = {p}")));
    }
    let (xc, _) = crate::model::center(x);
    let mut sv: Vec<f64> = xc.singular_values().iter().copied().collect();
    sv.sort_by(|a, b| b.total_cmp(a));
    let total: f64 = xc.iter().map(|v| v * v).sum();
    let top: f64 = sv[..r].iter().map(|s| s * s).sum();
    Ok((total - top) / n as f64 / (p - r) as f64)
}

/// Mean squared entry-wise errors after alignment.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BlockMse {
    pub w: f64,
    pub c: f64,
    pub b: f64,
    pub theta_t2: f64,
    pub sigma_h2: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Alignment {
    /// Estimated component `k` is matched to truth component `perm[k]`.
    pub perm: Vec<usize>,
    pub flips: Vec<bool>,
    pub aligned: PplsParams,
    pub mse: BlockMse,
}

/// Matches estimated components to true ones by maximizing
/// `Σ_k |w_kᵀ w_{true, perm(k)}|` (Hungarian assignment), flips `(w_k, c_k)`
/// jointly to make each matched correlation nonnegative, and scores blocks.
pub fn align_params(est: &PplsParams, truth: &PplsParams) -> Result<Alignment> {
    if est.p() != truth.p() || est.q() != truth.q() || est.r() != truth.r() {
        return Err(PplsError::Dimension("estimate and truth have different shapes".into()));
    }
    let r = est.r();
    let corr = est.w.matrix().tr_mul(truth.w.matrix());
    let cost = DMatrix::from_fn(r, r, |k, j| -corr[(k, j)].abs());
    let perm = hungarian(&cost);
    let flips: Vec<bool> = (0..r).map(|k| corr[(k, perm[k])] < 0.0).collect();
    let mut w = DMatrix::zeros(est.p(), r);
    let mut c = DMatrix::zeros(est.q(), r);
    let mut b = DVector::zeros(r);
    let mut th = DVector::zeros(r);
    for k in 0..r {
        let j = perm[k];
        let s = if flips[k] { -1.0 } else { 1.0 };
        w.set_column(j, &(est.w.matrix().column(k) * s));
        c.set_column(j, &(est.c.matrix().column(k) * s));
        b[j] = est.b[k];
        th[j] = est.theta_t2[k];
    }
    let msq = |a: &DMatrix<f64>, t: &DMatrix<f64>| (a - t).map(|v| v * v).mean();
    let mse = BlockMse {
        w: msq(&w, truth.w.matrix()),
        c: msq(&c, truth.c.matrix()),
        b: (&b - &truth.b).map(|v| v * v).mean(),
        theta_t2: (&th - &truth.theta_t2).map(|v| v * v).mean(),
        sigma_h2: (est.sigma_h2 - truth.sigma_h2).powi(2),
    };
    let aligned = PplsParams {
        w: StiefelPoint::new(w)?,
        c: StiefelPoint::new(c)?,
        b,
        theta_t2: th,
        ..est.clone()
    };
    Ok(Alignment {
        perm,
        flips,
        aligned,
        mse,
    })
}

/// Minimum-cost assignment for a square cost matrix: `result[row] = column`.
pub fn hungarian(cost: &DMatrix<f64>) -> Vec<usize> {
    let n = cost.nrows();
    // Potentials formulation with 1-based sentinel column 0.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut way = vec![0usize; n + 1];
    let mut col_row = vec![0usize; n + 1];
    for i in 1..=n {
        col_row[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = col_row[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost[(i0 - 1, j - 1)] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[col_row[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if col_row[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            col_row[j0] = col_row[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut out = vec![0; n];
    for j in 1..=n {
        out[col_row[j] - 1] = j - 1;
    }
    out
}

/// One long-format record.
#[derive(Debug, Clone, PartialEq)]
pub struct Row {
    pub trial: usize,
    pub method: String,
    pub metric: String,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Aggregate {
    pub method: String,
    pub metric: String,
    pub mean: f64,
    pub sd: f64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StudyResult {
    pub kind: StudyKind,
    pub rows: Vec<Row>,
    /// `(trial, error)` for trials that failed.
    pub failures: Vec<(usize, String)>,
}

impl StudyResult {
    pub fn values(&self, method: &str, metric: &str) -> Vec<f64> {
        self.rows
            .iter()
            .filter(|r| r.method == method && r.metric == metric)
            .map(|r| r.value)
            .collect()
    }

    pub fn mean(&self, method: &str, metric: &str) -> f64 {
        let v = self.values(method, metric);
        v.iter().sum::<f64>() / v.len() as f64
    }

    /// Mean and sample SD per (method, metric), in first-appearance order.
    pub fn aggregate(&self) -> Vec<Aggregate> {
        let mut order: Vec<(String, String)> = Vec::new();
        let mut groups: BTreeMap<(String, String), Vec<f64>> = BTreeMap::new();
        for r in &self.rows {
            let key = (r.method.clone(), r.metric.clone());
            let g = groups.entry(key.clone()).or_default();
            if g.is_empty() {
                order.push(key);
            }
            g.push(r.value);
        }
        order
            .into_iter()
            .map(|key| {
                let v = &groups[&key];
                let n = v.len();
                let mean = v.iter().sum::<f64>() / n as f64;
                let sd = if n > 1 {
                    (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
                } else {
                    0.0
                };
                Aggregate {
                    method: key.0,
                    metric: key.1,
                    mean,
                    sd,
                    count: n,
                }
            })
            .collect()
    }

    pub fn long_csv(&self) -> String {
        let mut s = String::from("study,trial,method,metric,value\n");
        for r in &self.rows {
            let _ = writeln!(s, "{},{},{},{},{:.16e}", self.kind, r.trial, r.method, r.metric, r.value);
        }
        s
    }

    /// One row per method; `<metric>_mean` and `<metric>_sd` columns.
    pub fn wide_csv(&self) -> String {
        let agg = self.aggregate();
        let mut metrics: Vec<String> = Vec::new();
        let mut methods: Vec<String> = Vec::new();
        for a in &agg {
            if !metrics.contains(&a.metric) {
                metrics.push(a.metric.clone());
            }
            if !methods.contains(&a.method) {
                methods.push(a.method.clone());
            }
        }
        let mut s = String::from("study,method");
        for m in &metrics {
            let _ = write!(s, ",{m}_mean,{m}_sd");
        }
        s.push('\n');
        for method in &methods {
            let _ = write!(s, "{},{method}", self.kind);
            for m in &metrics {
                match agg.iter().find(|a| &a.method == method && &a.metric == m) {
                    Some(a) => {
                        let _ = write!(s, ",{:.16e},{:.16e}", a.mean, a.sd);
                    }
                    None => s.push_str(",,"),
                }
            }
            s.push('\n');
        }
        s
    }

    /// Writes `<study>_long.csv` and `<study>_wide.csv` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join(format!("{}_long.csv", self.kind)), self.long_csv())?;
        std::fs::write(dir.join(format!("{}_wide.csv", self.kind)), self.wide_csv())?;
        Ok(())
    }
}

struct TrialOut {
    rows: Vec<Row>,
}

impl TrialOut {
    fn new() -> Self {
        TrialOut { rows: Vec::new() }
    }

    fn push(&mut self, trial: usize, method: impl Into<String>, metric: impl Into<String>, value: f64) {
        self.rows.push(Row {
            trial,
            method: method.into(),
            metric: metric.into(),
            value,
        });
    }
}

/// Runs every trial of the configured study. Trial `k` draws from streams
/// derived from `(seed, k)`; a failed trial is recorded and skipped.
pub fn run_study(cfg: &StudyConfig) -> Result<StudyResult> {
    cfg.validate()?;
    let run = |trial: usize| -> Result<TrialOut> {
        match cfg.kind {
            StudyKind::PpcaVerify => ppca_trial(cfg, trial),
            StudyKind::BiasFloor => bias_floor_trial(cfg, trial),
            StudyKind::SignalSweep => signal_sweep_trial(cfg, trial),
            StudyKind::Recovery => recovery_trial(cfg, trial),
            StudyKind::Calibration => calibration_trial(cfg, trial, false),
            StudyKind::RankSelection => rank_selection_trial(cfg, trial),
            StudyKind::NonGaussian => calibration_trial(cfg, trial, true),
        }
    };
    let outs: Vec<Result<TrialOut>> = if cfg.parallel {
        (0..cfg.trials).into_par_iter().map(run).collect()
    } else {
        (0..cfg.trials).map(run).collect()
    };
    let mut rows = Vec::new();
    let mut failures = Vec::new();
    for (trial, out) in outs.into_iter().enumerate() {
        match out {
            Ok(o) => rows.extend(o.rows),
            Err(e) => failures.push((trial, e.to_string())),
        }
    }
    Ok(StudyResult {
        kind: cfg.kind,
        rows,
        failures,
    })
}

fn trial_rng(cfg: &StudyConfig, trial: usize, method: u64) -> RngStream {
    RngStream::for_trial(cfg.seed, trial as u64, method)
}

fn ppca_trial(cfg: &StudyConfig, trial: usize) -> Result<TrialOut> {
    let mut rng = trial_rng(cfg, trial, 0);
    let w = random_stiefel(cfg.p, cfg.r, &mut rng)?;
    let sigma2 = cfg.noise.0;
    let x = sample_view(&w, &cfg.theta(), sigma2, cfg.n[0], &mut rng);
    let m = crate::model::center(&x).0;
    let sxx = crate::model::symmetrize(m.tr_mul(&m) / x.nrows() as f64);
    let spectral = noise_subspace_estimate(&sxx, cfg.r)?.value;
    let mle = tipping_bishop_sigma2(&x, cfg.r)?;
    let mut out = TrialOut::new();
    out.push(trial, "spectral", "estimate", spectral);
    out.push(trial, "spectral", "abs_err", (spectral - sigma2).abs());
    out.push(trial, "tipping_bishop", "estimate", mle);
    out.push(trial, "tipping_bishop", "abs_err", (mle - sigma2).abs());
    out.push(trial, "spectral", "diff_vs_mle", (spectral - mle).abs());
    Ok(out)
}

fn view_moments(x: &DMatrix<f64>) -> DMatrix<f64> {
    let (xc, _) = crate::model::center(x);
    crate::model::symmetrize(xc.tr_mul(&xc) / x.nrows() as f64)
}

fn bias_floor_trial(cfg: &StudyConfig, trial: usize) -> Result<TrialOut> {
    let mut out = TrialOut::new();
    let sigma2 = cfg.noise.0;
    for (k, &n) in cfg.n.iter().enumerate() {
        let mut rng = trial_rng(cfg, trial, k as u64);
        let w = random_stiefel(cfg.p, cfg.r, &mut rng)?;
        let sxx = view_moments(&sample_view(&w, &cfg.theta(), sigma2, n, &mut rng));
        let full = full_spectrum_estimate(&sxx)?.value;
        let sub = noise_subspace_estimate(&sxx, cfg.r)?.value;
        out.push(trial, format!("full_spectrum/N={n}"), "estimate", full);
        out.push(trial, format!("full_spectrum/N={n}"), "bias", full - sigma2);
        out.push(trial, format!("subspace/N={n}"), "estimate", sub);
        out.push(trial, format!("subspace/N={n}"), "bias", sub - sigma2);
    }
    Ok(out)
}

/// Signal strength scales `θ²`. Every `s` reuses the same loadings and draws.
fn signal_sweep_trial(cfg: &StudyConfig, trial: usize) -> Result<TrialOut> {
    let mut out = TrialOut::new();
    let sigma2 = cfg.noise.0;
    let base = cfg.theta();
    for &s in &cfg.signals {
        let mut rng = trial_rng(cfg, trial, 0);
        let w = random_stiefel(cfg.p, cfg.r, &mut rng)?;
        let sxx = view_moments(&sample_view(&w, &(&base * s), sigma2, cfg.n[0], &mut rng));
        let sub = noise_subspace_estimate(&sxx, cfg.r)?.value;
        let full = full_spectrum_estimate(&sxx)?.value;
        out.push(trial, format!("subspace/s={s}"), "abs_err", (sub - sigma2).abs());
        out.push(trial, format!("full_spectrum/s={s}"), "abs_err", (full - sigma2).abs());
    }
    Ok(out)
}

fn recovery_trial(cfg: &StudyConfig, trial: usize) -> Result<TrialOut> {
    let mut out = TrialOut::new();
    for (k, &n) in cfg.n.iter().enumerate() {
        let mut rng = trial_rng(cfg, trial, k as u64);
        let truth = synthetic_truth(cfg.p, cfg.q, &cfg.theta(), cfg.noise, &mut rng)?;
        let (x, y) = sample_dataset(&truth, n, &cfg.noise_law, &mut rng)?;
        let m = sample_moments(&x, &y)?;
        let (ne, nf) = noise_for_rank(&m, cfg.r, RankNoise::V2, cfg.r)?;
        for &solver in &cfg.solvers {
            let start_rng = trial_rng(cfg, trial, 100 + k as u64);
            let rep = multistart_fit(&m, cfg.r, ne.value, nf.value, &cfg.start_config(solver), &start_rng)?;
            let al = align_params(&rep.params, &truth)?;
            let method = format!("{solver}/N={n}");
            out.push(trial, &method, "mse_w", al.mse.w);
            out.push(trial, &method, "mse_c", al.mse.c);
            out.push(trial, &method, "mse_b", al.mse.b);
            out.push(trial, &method, "mse_theta_t2", al.mse.theta_t2);
            out.push(trial, &method, "mse_sigma_h2", al.mse.sigma_h2);
            out.push(trial, &method, "abs_err_sigma_e2", (ne.value - truth.sigma_e2).abs());
            out.push(trial, &method, "abs_err_sigma_f2", (nf.value - truth.sigma_f2).abs());
            out.push(trial, &method, "objective", rep.final_objective());
            out.push(trial, &method, "iterations", rep.iterations as f64);
            out.push(trial, &method, "converged", rep.converged as u8 as f64);
            out.push(trial, &method, "monotone", rep.is_monotone(1e-10) as u8 as f64);
        }
    }
    Ok(out)
}

/// Outer `K`-fold evaluation. Per fold: optional rank-INT of both views on
/// the training rows, noise estimation and multi-start fit, inner-CV `γ`
/// and pooled inner `κ`, then coverage on the held-out rows in the original
/// scale. The "plain" method uses `γ = κ = 1`.
fn calibration_trial(cfg: &StudyConfig, trial: usize, non_gaussian: bool) -> Result<TrialOut> {
    let mut rng = trial_rng(cfg, trial, 0);
    let truth = synthetic_truth(cfg.p, cfg.q, &cfg.theta(), cfg.noise, &mut rng)?;
    let (x, y) = sample_dataset(&truth, cfg.n[0], &cfg.noise_law, &mut rng)?;
    let folds = crate::pipeline::kfold(x.nrows(), cfg.folds, &mut trial_rng(cfg, trial, 1))?;
    let transforms: &[Transform] = if non_gaussian {
        &[Transform::Identity, Transform::RankInt]
    } else {
        &[Transform::Identity]
    };
    let solver = cfg.solvers[0];
    let mut out = TrialOut::new();
    for (ti, &tf) in transforms.iter().enumerate() {
        let label = |m: &str| {
            if non_gaussian {
                format!("{}/{m}", if tf == Transform::Identity { "raw" } else { "rankint" })
            } else {
                m.to_string()
            }
        };
        let mut cov_adaptive = Vec::new();
        let mut cov_plain = Vec::new();
        let mut pm = Vec::new();
        let mut gammas = Vec::new();
        let mut kappas = Vec::new();
        for (k, val) in folds.iter().enumerate() {
            let train = complement(x.nrows(), val);
            let (xt, yt) = (select_rows(&x, &train), select_rows(&y, &train));
            let (xv, yv) = (select_rows(&x, val), select_rows(&y, val));
            let (xt, gx) = gaussianize(&xt, tf)?;
            let (yt, gy) = gaussianize(&yt, tf)?;
            let xv_t = gx.transform(&xv)?;
            let m = sample_moments(&xt, &yt)?;
            let (ne, nf) = noise_for_rank(&m, cfg.r, RankNoise::V2, cfg.r)?;
            let stream = 10 + (ti * cfg.folds + k) as u64;
            let rep = multistart_fit(&m, cfg.r, ne.value, nf.value, &cfg.start_config(solver), &trial_rng(cfg, trial, stream))?;
            let sel = select_gamma(
                &rep.params,
                &xt,
                &yt,
                &cfg.gamma_grid,
                cfg.inner_folds,
                &cfg.start_config(solver),
                &trial_rng(cfg, trial, 1000 + stream),
            )?;
            let mut law = PredictiveLaw::from_moments(rep.params.clone(), sel.gamma, &m)?;
            law.set_kappa(sel.kappa);
            let plain = PredictiveLaw::from_moments(rep.params, 1.0, &m)?;
            cov_adaptive.push(original_scale_coverage(&law, &xv_t, &yv, &gy, &cfg.alphas)?);
            cov_plain.push(original_scale_coverage(&plain, &xv_t, &yv, &gy, &cfg.alphas)?);
            let ev = evaluate(&law, &xv_t, &gy.transform(&yv)?, &cfg.alphas)?;
            pm.push(ev.metrics);
            gammas.push(sel.gamma);
            kappas.push(sel.kappa);
        }
        for (name, cov) in [("adaptive", cov_adaptive), ("plain", cov_plain)] {
            let table = CalibrationTable::new(cfg.alphas.clone(), cov);
            let method = label(name);
            for (j, &a) in cfg.alphas.iter().enumerate() {
                out.push(trial, &method, format!("coverage_a{a}"), table.mean_coverage(j));
                out.push(trial, &method, format!("coverage_sd_a{a}"), table.sd_coverage(j));
                out.push(trial, &method, format!("ace_a{a}"), table.ace[j]);
            }
            out.push(trial, &method, "mean_ace", table.mean_ace());
        }
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        let method = label("adaptive");
        out.push(trial, &method, "mse", mean(&pm.iter().map(|m| m.mse).collect::<Vec<_>>()));
        out.push(trial, &method, "mae", mean(&pm.iter().map(|m| m.mae).collect::<Vec<_>>()));
        out.push(trial, &method, "r2", mean(&pm.iter().map(|m| m.r2).collect::<Vec<_>>()));
        out.push(trial, &method, "gamma", mean(&gammas));
        out.push(trial, &method, "kappa", mean(&kappas));
    }
    Ok(out)
}

/// Coverage of held-out `y` by intervals mapped back through the fitted
/// `y` transform. The transforms are monotone, so endpoints map directly.
fn original_scale_coverage(
    law: &PredictiveLaw,
    x: &DMatrix<f64>,
    y: &DMatrix<f64>,
    gy: &crate::pipeline::Gaussianizer,
    alphas: &[f64],
) -> Result<Vec<f64>> {
    alphas
        .iter()
        .map(|&a| {
            let mut iv = crate::predict::intervals(law, x, a)?;
            iv.lo = gy.inverse(&iv.lo)?;
            iv.hi = gy.inverse(&iv.hi)?;
            crate::predict::coverage(&iv, y)
        })
        .collect()
}

fn rank_selection_trial(cfg: &StudyConfig, trial: usize) -> Result<TrialOut> {
    let mut rng = trial_rng(cfg, trial, 0);
    let truth = synthetic_truth(cfg.p, cfg.q, &cfg.theta(), cfg.noise, &mut rng)?;
    let (x, y) = sample_dataset(&truth, cfg.n[0], &cfg.noise_law, &mut rng)?;
    let r_max = *cfg.rank_grid.iter().max().ok_or_else(|| PplsError::Config("empty rank grid".into()))?;
    let mut out = TrialOut::new();
    for (mi, mode) in [RankNoise::V1, RankNoise::V2].into_iter().enumerate() {
        let rs = RankSelectConfig {
            grid: cfg.rank_grid.clone(),
            r_max,
            criteria: vec![Criterion::Bic, Criterion::CvNll, Criterion::CvMse, Criterion::Gap],
            mode,
            k_out: cfg.folds,
            start: cfg.start_config(cfg.solvers[0]),
        };
        let res = rank_select(&x, &y, &rs, &trial_rng(cfg, trial, 1 + mi as u64))?;
        for c in &res.criteria {
            if c.criterion == Criterion::Gap && mode == RankNoise::V2 {
                continue;
            }
            let method = if c.criterion == Criterion::Gap {
                "gap".to_string()
            } else {
                format!("{}/{mode}", c.criterion)
            };
            out.push(trial, &method, "selected", c.selected as f64);
            out.push(trial, &method, "correct", (c.selected == cfg.r) as u8 as f64);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::random_instance;

    fn all_assignments(r: usize) -> Vec<(Vec<usize>, Vec<bool>)> {
        fn perms(v: Vec<usize>) -> Vec<Vec<usize>> {
            if v.len() <= 1 {
                return vec![v];
            }
            let mut out = Vec::new();
            for i in 0..v.len() {
                let mut rest = v.clone();
                let x = rest.remove(i);
                for mut p in perms(rest) {
                    p.insert(0, x);
                    out.push(p);
                }
            }
            out
        }
        let mut out = Vec::new();
        for p in perms((0..r).collect()) {
            for mask in 0..(1u32 << r) {
                out.push((p.clone(), (0..r).map(|k| mask >> k & 1 == 1).collect()));
            }
        }
        out
    }

    #[test]
    fn identical_estimate_aligns_trivially() {
        let (truth, _) = random_instance(9, 8, 3, 1);
        let al = align_params(&truth, &truth).unwrap();
        assert_eq!(al.perm, vec![0, 1, 2]);
        assert!(al.mse.w == 0.0 && al.mse.c == 0.0 && al.mse.b == 0.0 && al.mse.theta_t2 == 0.0);
    }

    #[test]
    fn swapped_and_negated_columns_align_to_zero() {
        let (truth, _) = random_instance(9, 8, 3, 2);
        let est = truth.clone();
        let swapped = PplsParams {
            w: est.w.permute_and_flip(&[1, 0, 2], &[true, false, false]),
            c: est.c.permute_and_flip(&[1, 0, 2], &[true, false, false]),
            b: DVector::from_vec(vec![est.b[1], est.b[0], est.b[2]]),
            theta_t2: DVector::from_vec(vec![est.theta_t2[1], est.theta_t2[0], est.theta_t2[2]]),
            ..est
        };
        let al = align_params(&swapped, &truth).unwrap();
        assert!(al.mse.w < 1e-30 && al.mse.c < 1e-30 && al.mse.b < 1e-30, "{:?}", al.mse);
    }

    #[test]
    fn hungarian_matches_exhaustive_search() {
        for seed in 0..30 {
            let r = 1 + (seed as usize % 4);
            let (a, _) = random_instance(9, 8, r, seed);
            let (b, _) = random_instance(9, 8, r, seed + 100);
            let al = align_params(&a, &b).unwrap();
            let mut best = f64::INFINITY;
            for (perm, flips) in all_assignments(r) {
                let mut w = DMatrix::zeros(9, r);
                for k in 0..r {
                    let s = if flips[k] { -1.0 } else { 1.0 };
                    w.set_column(perm[k], &(a.w.matrix().column(k) * s));
                }
                best = best.min((w - b.w.matrix()).map(|v| v * v).mean());
            }
            assert!((al.mse.w - best).abs() < 1e-12, "seed {seed}");
            let unaligned = (a.w.matrix() - b.w.matrix()).map(|v| v * v).mean();
            assert!(al.mse.w <= unaligned + 1e-15);
        }
    }

    #[test]
    fn config_parsing() {
        let text = "study = recovery\n# comment\np = 20\nq = 18 # inline\nn = 100, 200\nnoise = high\nsolver = bcd\nrank_grid = 2..4\n";
        let c = StudyConfig::parse(text, false).unwrap();
        assert_eq!(c.kind, StudyKind::Recovery);
        assert_eq!((c.p, c.q, c.r), (20, 18, 3));
        assert_eq!(c.n, vec![100, 200]);
        assert_eq!(c.noise, HIGH_NOISE);
        assert_eq!(c.solvers, vec![SolverKind::Bcd]);
        assert_eq!(c.rank_grid, vec![2, 3, 4]);
        assert!(StudyConfig::parse("study = recovery\nbogus = 1", false).is_err());
        assert!(StudyConfig::parse("p = 3", false).is_err());
    }

    #[test]
    fn studies_are_deterministic() {
        let mut c = StudyConfig::defaults(StudyKind::Recovery, false);
        c.p = 10;
        c.q = 9;
        c.r = 2;
        c.n = vec![200];
        c.trials = 2;
        c.starts = 2;
        let a = run_study(&c).unwrap();
        c.parallel = true;
        let b = run_study(&c).unwrap();
        assert_eq!(a.long_csv(), b.long_csv());
        assert_eq!(a.wide_csv(), b.wide_csv());
        assert!(a.failures.is_empty());
    }

    #[test]
    fn tipping_bishop_equals_spectral() {
        let mut c = StudyConfig::defaults(StudyKind::PpcaVerify, false);
        c.trials = 3;
        let res = run_study(&c).unwrap();
        assert!(res.values("spectral", "diff_vs_mle").iter().all(|d| *d < 1e-12));
    }
}
