//! The PPLS model: parameters, joint covariance, identifiability and sampling.
//!
//! Rows are generated as `t ~ N(0, Σ_t)`, `u = tB + h`, `x = tWᵀ + e`,
//! `y = uCᵀ + f` with `Σ_t`, `B` diagonal and isotropic noises.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rand_distr::{Distribution, Normal, Poisson, StandardNormal, StudentT};

use crate::error::{PplsError, Result};
use crate::rng::RngStream;
use crate::stiefel::StiefelPoint;

/// Lower bound kept on `θ²` and `b` during optimization.
pub const EPS_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct PplsParams {
    pub w: StiefelPoint,
    pub c: StiefelPoint,
    pub b: DVector<f64>,
    pub theta_t2: DVector<f64>,
    pub sigma_e2: f64,
    pub sigma_f2: f64,
    pub sigma_h2: f64,
    /// PCCA restriction `B = I`, `σ_h² = 0`. Solvers hold `b` and `σ_h²` fixed.
    pub pcca: bool,
}

impl PplsParams {
    pub fn new(
        w: StiefelPoint,
        c: StiefelPoint,
        b: DVector<f64>,
        theta_t2: DVector<f64>,
        sigma_e2: f64,
        sigma_f2: f64,
        sigma_h2: f64,
    ) -> Result<Self> {
        let params = PplsParams {
            w,
            c,
            b,
            theta_t2,
            sigma_e2,
            sigma_f2,
            sigma_h2,
            pcca: false,
        };
        params.validate()?;
        Ok(params)
    }

    pub fn p(&self) -> usize {
        self.w.p()
    }

    pub fn q(&self) -> usize {
        self.c.p()
    }

    pub fn r(&self) -> usize {
        self.w.r()
    }

    pub fn validate(&self) -> Result<()> {
        let (p, q, r) = (self.p(), self.q(), self.r());
        if self.c.r() != r || self.b.len() != r || self.theta_t2.len() != r {
            return Err(PplsError::Dimension(format!(
                "components disagree: W has {r}, C has {}, b has {}, theta_t2 has {}",
                self.c.r(),
                self.b.len(),
                self.theta_t2.len()
            )));
        }
        if r >= p.min(q) {
            return Err(PplsError::Rank(format!(
                "need r < min(p, q), got r = {r}, p = {p}, q = {q}"
            )));
        }
        if let Some(k) = self.b.iter().position(|v| !(*v > 0.0 && v.is_finite())) {
            return Err(PplsError::Input(format!("b[{k}] = {} must be positive", self.b[k])));
        }
        if let Some(k) = self.theta_t2.iter().position(|v| !(*v > 0.0 && v.is_finite())) {
            return Err(PplsError::Input(format!(
                "theta_t2[{k}] = {} must be positive",
                self.theta_t2[k]
            )));
        }
        for (name, v) in [("sigma_e2", self.sigma_e2), ("sigma_f2", self.sigma_f2)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(PplsError::Input(format!("{name} = {v} must be positive")));
            }
        }
        let h_ok = if self.pcca {
            self.sigma_h2 >= 0.0
        } else {
            self.sigma_h2 > 0.0
        };
        if !(h_ok && self.sigma_h2.is_finite()) {
            return Err(PplsError::Input(format!(
                "sigma_h2 = {} out of range",
                self.sigma_h2
            )));
        }
        Ok(())
    }

    /// Ordering key `θ²_k b_k`.
    pub fn strengths(&self) -> DVector<f64> {
        self.theta_t2.component_mul(&self.b)
    }
}

/// Centered second moments with `1/N` normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleMoments {
    pub sxx: DMatrix<f64>,
    pub syy: DMatrix<f64>,
    pub sxy: DMatrix<f64>,
    pub n: usize,
    pub mean_x: DVector<f64>,
    pub mean_y: DVector<f64>,
}

impl SampleMoments {
    /// Population moments `S = Σ(θ)` with zero means, tagged with sample size `n`.
    pub fn population(params: &PplsParams, n: usize) -> Self {
        let (p, q) = (params.p(), params.q());
        let sigma = assemble_joint_cov(params);
        SampleMoments {
            sxx: sigma.view((0, 0), (p, p)).into_owned(),
            syy: sigma.view((p, p), (q, q)).into_owned(),
            sxy: sigma.view((0, p), (p, q)).into_owned(),
            n,
            mean_x: DVector::zeros(p),
            mean_y: DVector::zeros(q),
        }
    }

    pub fn p(&self) -> usize {
        self.sxx.nrows()
    }

    pub fn q(&self) -> usize {
        self.syy.nrows()
    }

    /// The stacked `(p+q) × (p+q)` moment matrix.
    pub fn joint(&self) -> DMatrix<f64> {
        let (p, q) = (self.p(), self.q());
        let mut s = DMatrix::zeros(p + q, p + q);
        s.view_mut((0, 0), (p, p)).copy_from(&self.sxx);
        s.view_mut((p, p), (q, q)).copy_from(&self.syy);
        s.view_mut((0, p), (p, q)).copy_from(&self.sxy);
        s.view_mut((p, 0), (q, p)).copy_from(&self.sxy.transpose());
        s
    }
}

/// The joint covariance `Σ(θ)` of `(x, y)`.
pub fn assemble_joint_cov(params: &PplsParams) -> DMatrix<f64> {
    let (p, q) = (params.p(), params.q());
    let w = params.w.matrix();
    let c = params.c.matrix();
    let th = &params.theta_t2;
    let b = &params.b;

    let w_scaled = scale_columns(w, th);
    let mut sxx = &w_scaled * w.transpose();
    for i in 0..p {
        sxx[(i, i)] += params.sigma_e2;
    }
    let sxy = scale_columns(w, &th.component_mul(b)) * c.transpose();
    let yvar = b.component_mul(b).component_mul(th).add_scalar(params.sigma_h2);
    let mut syy = scale_columns(c, &yvar) * c.transpose();
    for i in 0..q {
        syy[(i, i)] += params.sigma_f2;
    }

    let mut s = DMatrix::zeros(p + q, p + q);
    s.view_mut((0, 0), (p, p)).copy_from(&sxx);
    s.view_mut((p, p), (q, q)).copy_from(&syy);
    s.view_mut((0, p), (p, q)).copy_from(&sxy);
    s.view_mut((p, 0), (q, p)).copy_from(&sxy.transpose());
    // Exact symmetry for downstream Cholesky and eigen routines.
    let st = s.transpose();
    (s + st) * 0.5
}

pub(crate) fn scale_columns(m: &DMatrix<f64>, d: &DVector<f64>) -> DMatrix<f64> {
    let mut out = m.clone();
    for (k, mut col) in out.column_iter_mut().enumerate() {
        col *= d[k];
    }
    out
}

/// Sorts components by decreasing `θ²_k b_k` (stable) and applies the sign
/// convention: each `(w_k, c_k)` pair is flipped jointly so that the
/// largest-magnitude entry of `w_k` is positive.
pub fn reorder_components(params: &PplsParams) -> PplsParams {
    reorder_with_permutation(params).0
}

/// As [`reorder_components`], also returning the permutation (`perm[k]` is the
/// source index of output component `k`) and the applied flips.
pub fn reorder_with_permutation(params: &PplsParams) -> (PplsParams, Vec<usize>, Vec<bool>) {
    let r = params.r();
    let key = params.strengths();
    let mut perm: Vec<usize> = (0..r).collect();
    perm.sort_by(|&i, &j| key[j].total_cmp(&key[i]));
    let flips: Vec<bool> = perm
        .iter()
        .map(|&src| {
            let col = params.w.matrix().column(src);
            let mut best = 0.0f64;
            let mut best_abs = -1.0;
            for &v in col.iter() {
                if v.abs() > best_abs {
                    best_abs = v.abs();
                    best = v;
                }
            }
            best < 0.0
        })
        .collect();
    let out = PplsParams {
        w: params.w.permute_and_flip(&perm, &flips),
        c: params.c.permute_and_flip(&perm, &flips),
        b: DVector::from_iterator(r, perm.iter().map(|&k| params.b[k])),
        theta_t2: DVector::from_iterator(r, perm.iter().map(|&k| params.theta_t2[k])),
        ..params.clone()
    };
    (out, perm, flips)
}

/// PCCA restriction `B = I_r`, `σ_h² = 0`.
pub fn pcca_specialize(params: &PplsParams) -> PplsParams {
    PplsParams {
        b: DVector::from_element(params.r(), 1.0),
        sigma_h2: 0.0,
        pcca: true,
        ..params.clone()
    }
}

/// Marginal law of the observation noises `e`, `f`. Every law is scaled to
/// the model's variance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum NoiseLaw {
    Gaussian,
    /// Student-t with `nu > 2` degrees of freedom.
    StudentT { nu: f64 },
    /// Equal-weight mixture of `N(±μ, s²)` with `μ/s` given by `mean_ratio`.
    GaussianMixture { mean_ratio: f64 },
    /// `Poisson(λ) − λ`.
    CenteredPoisson { lambda: f64 },
}

impl NoiseLaw {
    pub fn validate(&self) -> Result<()> {
        match *self {
            NoiseLaw::Gaussian => Ok(()),
            NoiseLaw::StudentT { nu } if nu > 2.0 && nu.is_finite() => Ok(()),
            NoiseLaw::StudentT { nu } => Err(PplsError::Config(format!(
                "student_t needs nu > 2 for finite variance, got {nu}"
            ))),
            NoiseLaw::GaussianMixture { mean_ratio } if mean_ratio >= 0.0 && mean_ratio.is_finite() => Ok(()),
            NoiseLaw::GaussianMixture { mean_ratio } => Err(PplsError::Config(format!(
                "mixture mean ratio must be non-negative, got {mean_ratio}"
            ))),
            NoiseLaw::CenteredPoisson { lambda } if lambda > 0.0 && lambda.is_finite() => Ok(()),
            NoiseLaw::CenteredPoisson { lambda } => Err(PplsError::Config(format!(
                "poisson rate must be positive, got {lambda}"
            ))),
        }
    }

    /// Fills a matrix with draws of variance `var`.
    fn sample(&self, rows: usize, cols: usize, var: f64, rng: &mut RngStream) -> DMatrix<f64> {
        let sd = var.sqrt();
        match *self {
            NoiseLaw::Gaussian => DMatrix::from_fn(rows, cols, |_, _| {
                sd * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng)
            }),
            NoiseLaw::StudentT { nu } => {
                let t = StudentT::new(nu).expect("validated");
                let scale = sd * ((nu - 2.0) / nu).sqrt();
                DMatrix::from_fn(rows, cols, |_, _| scale * t.sample(rng))
            }
            NoiseLaw::GaussianMixture { mean_ratio } => {
                // μ² + s² = var with μ = mean_ratio·s.
                let s = sd / (1.0 + mean_ratio * mean_ratio).sqrt();
                let mu = mean_ratio * s;
                let comp = Normal::new(0.0, s).expect("finite scale");
                DMatrix::from_fn(rows, cols, |_, _| {
                    let sign = if rand::Rng::random::<bool>(rng) { 1.0 } else { -1.0 };
                    sign * mu + comp.sample(rng)
                })
            }
            NoiseLaw::CenteredPoisson { lambda } => {
                let pois = Poisson::new(lambda).expect("validated");
                let scale = sd / lambda.sqrt();
                DMatrix::from_fn(rows, cols, |_, _| {
                    let k: f64 = pois.sample(rng);
                    (k - lambda) * scale
                })
            }
        }
    }
}

impl fmt::Display for NoiseLaw {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            NoiseLaw::Gaussian => write!(f, "gaussian"),
            NoiseLaw::StudentT { nu } => write!(f, "student_t({nu})"),
            NoiseLaw::GaussianMixture { mean_ratio } => write!(f, "gaussian_mixture({mean_ratio})"),
            NoiseLaw::CenteredPoisson { lambda } => write!(f, "centered_poisson({lambda})"),
        }
    }
}

impl FromStr for NoiseLaw {
    type Err = PplsError;

    /// Accepts `gaussian`, `student_t(5)`, `t5`, `gaussian_mixture`,
    /// `gaussian_mixture(1)`, `centered_poisson`, `centered_poisson(5)`.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim().to_ascii_lowercase();
        let (name, arg) = match s.find('(') {
            Some(open) if s.ends_with(')') => {
                let inner = &s[open + 1..s.len() - 1];
                let v: f64 = inner.trim().parse().map_err(|_| {
                    PplsError::Config(format!("bad noise law parameter {inner:?}"))
                })?;
                (&s[..open], Some(v))
            }
            Some(_) => return Err(PplsError::Config(format!("malformed noise law {s:?}"))),
            None => (s.as_str(), None),
        };
        let law = match (name, arg) {
            ("gaussian" | "normal", None) => NoiseLaw::Gaussian,
            ("student_t" | "t", Some(nu)) => NoiseLaw::StudentT { nu },
            (n, None) if n.starts_with('t') && n[1..].parse::<f64>().is_ok() => NoiseLaw::StudentT {
                nu: n[1..].parse().unwrap(),
            },
            ("gaussian_mixture" | "mixture", a) => NoiseLaw::GaussianMixture {
                mean_ratio: a.unwrap_or(1.0),
            },
            ("centered_poisson" | "poisson", a) => NoiseLaw::CenteredPoisson {
                lambda: a.unwrap_or(5.0),
            },
            _ => return Err(PplsError::Config(format!("unknown noise law {s:?}"))),
        };
        law.validate()?;
        Ok(law)
    }
}

/// Draws `N` rows `(x, y)` from the model. The noise law applies to `e` and `f`.
pub fn sample_dataset(
    params: &PplsParams,
    n: usize,
    noise: &NoiseLaw,
    rng: &mut RngStream,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    if n < 2 {
        return Err(PplsError::Input(format!("need N >= 2 samples, got {n}")));
    }
    noise.validate()?;
    let (p, q, r) = (params.p(), params.q(), params.r());
    let sd_t = params.theta_t2.map(f64::sqrt);
    let z = gaussian_matrix(n, r, rng);
    let t = scale_columns(&z, &sd_t);
    let h = gaussian_matrix(n, r, rng) * params.sigma_h2.sqrt();
    let u = scale_columns(&t, &params.b) + h;
    let e = noise.sample(n, p, params.sigma_e2, rng);
    let f = noise.sample(n, q, params.sigma_f2, rng);
    let x = &t * params.w.matrix().transpose() + e;
    let y = &u * params.c.matrix().transpose() + f;
    Ok((x, y))
}

fn gaussian_matrix(rows: usize, cols: usize, rng: &mut RngStream) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| {
        <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng)
    })
}

/// Column means and centered cross products divided by `N`.
pub fn sample_moments(x: &DMatrix<f64>, y: &DMatrix<f64>) -> Result<SampleMoments> {
    let n = x.nrows();
    if y.nrows() != n {
        return Err(PplsError::Dimension(format!(
            "X has {n} rows but Y has {}",
            y.nrows()
        )));
    }
    if n < 2 {
        return Err(PplsError::Input(format!("need N >= 2 samples, got {n}")));
    }
    let (xc, mean_x) = center(x);
    let (yc, mean_y) = center(y);
    let inv = 1.0 / n as f64;
    let sxx = symmetrize(xc.tr_mul(&xc) * inv);
    let syy = symmetrize(yc.tr_mul(&yc) * inv);
    let sxy = xc.tr_mul(&yc) * inv;
    Ok(SampleMoments {
        sxx,
        syy,
        sxy,
        n,
        mean_x,
        mean_y,
    })
}

/// Subtracts column means; returns the centered copy and the means.
pub fn center(x: &DMatrix<f64>) -> (DMatrix<f64>, DVector<f64>) {
    let n = x.nrows() as f64;
    let mean = DVector::from_iterator(x.ncols(), x.column_iter().map(|c| c.sum() / n));
    let mut xc = x.clone();
    for (j, mut col) in xc.column_iter_mut().enumerate() {
        col.add_scalar_mut(-mean[j]);
    }
    (xc, mean)
}

pub(crate) fn symmetrize(m: DMatrix<f64>) -> DMatrix<f64> {
    let mt = m.transpose();
    (m + mt) * 0.5
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stiefel::random_stiefel;

    pub(crate) fn random_params(p: usize, q: usize, r: usize, seed: u64) -> PplsParams {
        let mut rng = RngStream::new(seed, 0);
        let w = random_stiefel(p, r, &mut rng).unwrap();
        let c = random_stiefel(q, r, &mut rng).unwrap();
        let b = DVector::from_fn(r, |k, _| 1.2 - 0.1 * k as f64);
        let th = DVector::from_fn(r, |k, _| 2.0 - 0.2 * k as f64);
        PplsParams::new(w, c, b, th, 0.3, 0.4, 0.1).unwrap()
    }

    fn unit_block(d: usize) -> StiefelPoint {
        StiefelPoint::identity_block(d, 1).unwrap()
    }

    #[test]
    fn joint_cov_by_hand() {
        let params = PplsParams {
            w: unit_block(2),
            c: unit_block(2),
            b: DVector::from_element(1, 1.0),
            theta_t2: DVector::from_element(1, 1.0),
            sigma_e2: 1.0,
            sigma_f2: 1.0,
            sigma_h2: 0.0,
            pcca: true,
        };
        let s = assemble_joint_cov(&params);
        let expected = DMatrix::from_row_slice(
            4,
            4,
            &[
                2.0, 0.0, 1.0, 0.0, //
                0.0, 1.0, 0.0, 0.0, //
                1.0, 0.0, 2.0, 0.0, //
                0.0, 0.0, 0.0, 1.0,
            ],
        );
        assert_eq!(s, expected);
    }

    #[test]
    fn joint_cov_eigenvalues_bounded_below_by_noise() {
        for seed in 0..20 {
            let params = random_params(7, 5, 2, seed);
            let ev = assemble_joint_cov(&params).symmetric_eigenvalues();
            let floor = params.sigma_e2.min(params.sigma_f2);
            assert!(ev.min() >= floor - 1e-10, "seed {seed}: {}", ev.min());
        }
    }

    #[test]
    fn pcca_cross_block_has_no_b() {
        let params = pcca_specialize(&random_params(6, 5, 2, 3));
        let s = assemble_joint_cov(&params);
        let direct = scale_columns(params.w.matrix(), &params.theta_t2) * params.c.matrix().transpose();
        assert_eq!(s.view((0, 6), (6, 5)).into_owned(), direct);
        let syy = scale_columns(params.c.matrix(), &params.theta_t2) * params.c.matrix().transpose()
            + DMatrix::identity(5, 5) * params.sigma_f2;
        assert!((s.view((6, 6), (5, 5)) - syy).amax() < 1e-15);
        assert_eq!(pcca_specialize(&params), params);
    }

    #[test]
    fn reorder_identity_and_swap() {
        let params = reorder_components(&random_params(6, 6, 2, 1));
        let (same, perm, _) = reorder_with_permutation(&params);
        assert_eq!(perm, vec![0, 1]);
        assert_eq!(same, params);

        let mut swapped = params.clone();
        swapped.theta_t2 = DVector::from_vec(vec![1.0, 3.0]);
        swapped.b = DVector::from_vec(vec![1.0, 1.0]);
        let (out, perm, _) = reorder_with_permutation(&swapped);
        assert_eq!(perm, vec![1, 0]);
        assert_eq!(out.strengths().as_slice(), &[3.0, 1.0]);
    }

    #[test]
    fn reorder_sign_convention() {
        let params = reorder_components(&random_params(8, 6, 3, 4));
        for k in 0..3 {
            let col = params.w.matrix().column(k);
            let imax = col.iamax();
            assert!(col[imax] > 0.0);
        }
    }

    #[test]
    fn cov_invariant_under_pair_flips_and_permutations() {
        let params = random_params(8, 7, 3, 5);
        let base = assemble_joint_cov(&params);
        let perm = [2, 0, 1];
        let flips = [true, false, true];
        let moved = PplsParams {
            w: params.w.permute_and_flip(&perm, &flips),
            c: params.c.permute_and_flip(&perm, &flips),
            b: DVector::from_iterator(3, perm.iter().map(|&k| params.b[k])),
            theta_t2: DVector::from_iterator(3, perm.iter().map(|&k| params.theta_t2[k])),
            ..params.clone()
        };
        assert!((assemble_joint_cov(&moved) - &base).norm() <= 1e-12);
    }

    #[test]
    fn noiseless_samples_lie_in_loading_span() {
        let mut params = random_params(6, 5, 2, 6);
        params.sigma_e2 = 1e-300;
        params.sigma_f2 = 1e-300;
        params.sigma_h2 = 1e-300;
        let (x, _) = sample_dataset(&params, 50, &NoiseLaw::Gaussian, &mut RngStream::new(1, 1)).unwrap();
        let w = params.w.matrix();
        let resid = &x - &x * w * w.transpose();
        assert!(resid.amax() <= 1e-12);
        let (xc, _) = center(&x);
        let rank = xc.svd(false, false).rank(1e-9);
        assert!(rank <= 2);
    }

    #[test]
    fn large_sample_covariance_matches_model() {
        let params = random_params(5, 4, 2, 7);
        let (x, y) = sample_dataset(&params, 200_000, &NoiseLaw::Gaussian, &mut RngStream::new(2, 0)).unwrap();
        let m = sample_moments(&x, &y).unwrap();
        let pop = SampleMoments::population(&params, 0);
        let rel = (&m.sxx - &pop.sxx).norm() / pop.sxx.norm();
        assert!(rel < 0.02, "relative error {rel}");
    }

    #[test]
    fn noise_laws_match_variance() {
        let mut params = random_params(4, 4, 1, 8);
        params.sigma_e2 = 0.5;
        let pure = PplsParams {
            theta_t2: DVector::from_element(1, 1e-300),
            ..params.clone()
        };
        let laws = [
            NoiseLaw::StudentT { nu: 5.0 },
            NoiseLaw::GaussianMixture { mean_ratio: 1.0 },
            NoiseLaw::CenteredPoisson { lambda: 5.0 },
        ];
        for (k, law) in laws.iter().enumerate() {
            let (x, _) = sample_dataset(&pure, 200_000, law, &mut RngStream::new(3, k as u64)).unwrap();
            let (xc, _) = center(&x);
            for j in 0..4 {
                let v = xc.column(j).norm_squared() / 200_000.0;
                assert!((v - 0.5).abs() / 0.5 < 0.05, "{law}: coordinate {j} variance {v}");
            }
        }
    }

    #[test]
    fn noise_law_parsing() {
        assert_eq!("gaussian".parse::<NoiseLaw>().unwrap(), NoiseLaw::Gaussian);
        assert_eq!("student_t(5)".parse::<NoiseLaw>().unwrap(), NoiseLaw::StudentT { nu: 5.0 });
        assert_eq!("t5".parse::<NoiseLaw>().unwrap(), NoiseLaw::StudentT { nu: 5.0 });
        assert_eq!(
            "centered_poisson".parse::<NoiseLaw>().unwrap(),
            NoiseLaw::CenteredPoisson { lambda: 5.0 }
        );
        assert!(matches!("cauchy".parse::<NoiseLaw>(), Err(PplsError::Config(_))));
        assert!(matches!("student_t(2)".parse::<NoiseLaw>(), Err(PplsError::Config(_))));
    }

    #[test]
    fn moments_edge_cases() {
        let x = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 1.0, 2.0]);
        let m = sample_moments(&x, &x).unwrap();
        assert_eq!(m.sxx.amax(), 0.0);
        assert_eq!(m.sxy.amax(), 0.0);
        assert!(matches!(
            sample_moments(&x.rows(0, 1).into_owned(), &x.rows(0, 1).into_owned()),
            Err(PplsError::Input(_))
        ));
    }

    #[test]
    fn moments_identical_views_match() {
        let x = DMatrix::from_row_slice(4, 2, &[1.0, 0.5, -2.0, 1.5, 0.25, 3.0, 4.0, -1.0]);
        let m = sample_moments(&x, &x).unwrap();
        assert_eq!(m.sxx, m.syy);
        assert_eq!(m.sxx, m.sxy);
        assert_eq!(m.sxy, m.sxy.transpose());
    }

    #[test]
    fn moments_match_double_loop() {
        let x = DMatrix::from_row_slice(4, 2, &[1.0, 0.5, -2.0, 1.5, 0.25, 3.0, 4.0, -1.0]);
        let y = DMatrix::from_row_slice(4, 2, &[0.0, 1.0, 2.0, -1.0, 1.0, 1.0, -3.0, 0.5]);
        let m = sample_moments(&x, &y).unwrap();
        let n = 4.0;
        for a in 0..2 {
            for b in 0..2 {
                let (mut mx_a, mut mx_b, mut my_b) = (0.0, 0.0, 0.0);
                for i in 0..4 {
                    mx_a += x[(i, a)] / n;
                    mx_b += x[(i, b)] / n;
                    my_b += y[(i, b)] / n;
                }
                let (mut sxx, mut sxy) = (0.0, 0.0);
                for i in 0..4 {
                    sxx += (x[(i, a)] - mx_a) * (x[(i, b)] - mx_b) / n;
                    sxy += (x[(i, a)] - mx_a) * (y[(i, b)] - my_b) / n;
                }
                assert!((m.sxx[(a, b)] - sxx).abs() <= 1e-14);
                assert!((m.sxy[(a, b)] - sxy).abs() <= 1e-14);
            }
        }
    }

    #[test]
    fn sample_moments_are_psd() {
        let params = random_params(10, 8, 3, 9);
        let (x, y) = sample_dataset(&params, 30, &NoiseLaw::Gaussian, &mut RngStream::new(4, 0)).unwrap();
        let m = sample_moments(&x, &y).unwrap();
        assert!(m.joint().symmetric_eigenvalues().min() >= -1e-10);
    }

    #[test]
    fn invalid_params_rejected() {
        let params = random_params(5, 5, 2, 10);
        let mut bad = params.clone();
        bad.b[0] = -1.0;
        assert!(bad.validate().is_err());
        let mut bad = params.clone();
        bad.sigma_h2 = 0.0;
        assert!(bad.validate().is_err());
        bad.pcca = true;
        assert!(bad.validate().is_ok());
    }
}
