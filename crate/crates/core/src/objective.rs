//! Scalar form of the observed-data negative log-likelihood
//! `ln det Σ(θ) + tr(S Σ(θ)⁻¹)`.
//!
//! With orthonormal loadings the objective separates into a noise/trace offset
//! plus `r` per-component terms `ℓ_i = ln D_i − (Φ_x Q_x + Φ_y Q_y + Φ_xy Q_xy)(i)`,
//! each depending on `(θ²_i, b_i, σ_h²)` and three projected statistics.

use nalgebra::{DMatrix, DVector};

use crate::error::{PplsError, Result};
use crate::model::{assemble_joint_cov, PplsParams, SampleMoments};
use crate::stiefel::StiefelPoint;

/// Projected second moments along the current loadings.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectedStats {
    /// `w_iᵀ S_xx w_i / σ_e²`.
    pub qx: DVector<f64>,
    /// `c_iᵀ S_yy c_i / σ_f²`.
    pub qy: DVector<f64>,
    /// `2 w_iᵀ S_xy c_i / (σ_e σ_f)`.
    pub qxy: DVector<f64>,
    pub tr_sxx: f64,
    pub tr_syy: f64,
    pub p: usize,
    pub q: usize,
    pub sigma_e2: f64,
    pub sigma_f2: f64,
}

impl ProjectedStats {
    pub fn r(&self) -> usize {
        self.qx.len()
    }

    /// `σ_e σ_f Q_xy(i) = 2 w_iᵀ S_xy c_i`, the cross statistic entering `ℓ_i`.
    pub fn cross(&self, i: usize) -> f64 {
        self.qxy[i] * (self.sigma_e2 * self.sigma_f2).sqrt()
    }

    /// Noise and trace part of the objective, independent of the latent scalars.
    pub fn offset(&self) -> f64 {
        let r = self.r() as f64;
        (self.p as f64 - r) * self.sigma_e2.ln()
            + (self.q as f64 - r) * self.sigma_f2.ln()
            + self.tr_sxx / self.sigma_e2
            + self.tr_syy / self.sigma_f2
    }

    /// Statistics of one component in the form consumed by [`ComponentTerm`].
    pub fn component(&self, i: usize) -> ComponentStats {
        ComponentStats {
            qx: self.qx[i],
            qy: self.qy[i],
            cross: self.cross(i),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ComponentStats {
    pub qx: f64,
    pub qy: f64,
    pub cross: f64,
}

/// Fixed noise variances shared by all components.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Noise {
    pub sigma_e2: f64,
    pub sigma_f2: f64,
    pub sigma_h2: f64,
}

impl Noise {
    pub fn of(params: &PplsParams) -> Self {
        Noise {
            sigma_e2: params.sigma_e2,
            sigma_f2: params.sigma_f2,
            sigma_h2: params.sigma_h2,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComponentCoeffs {
    pub d: DVector<f64>,
    pub phi_x: DVector<f64>,
    pub phi_y: DVector<f64>,
    pub phi_xy: DVector<f64>,
}

/// Decomposed objective value.
#[derive(Debug, Clone, PartialEq)]
pub struct NllParts {
    pub total: f64,
    pub offset: f64,
    pub ell: DVector<f64>,
}

/// `ℓ_i` and its derivatives in `s = θ²_i`, `b = b_i` and `g = σ_h²`.
///
/// Writing `a = σ_f² + σ_h²`, `α = σ_e²` and `X` for the cross statistic,
/// `D = a(s + α) + b²sα` and `ℓ = ln D − N/D` with
/// `N = a s Q_x + σ_h²(s + α) Q_y + b² s α Q_y + b s X`.
#[derive(Debug, Clone, Copy)]
pub struct ComponentTerm {
    d: f64,
    n: f64,
    d_s: f64,
    n_s: f64,
    d_b: f64,
    n_b: f64,
    d_g: f64,
    n_g: f64,
    d_bb: f64,
    n_bb: f64,
    d_sb: f64,
    n_sb: f64,
    n_sg: f64,
    d_sg: f64,
    n_bg: f64,
    d_bg: f64,
}

impl ComponentTerm {
    pub fn new(s: f64, b: f64, noise: &Noise, st: &ComponentStats) -> Self {
        let al = noise.sigma_e2;
        let g = noise.sigma_h2;
        let a = noise.sigma_f2 + g;
        let ComponentStats { qx, qy, cross: x } = *st;
        ComponentTerm {
            d: a * (s + al) + b * b * s * al,
            n: a * s * qx + g * (s + al) * qy + b * b * s * al * qy + b * s * x,
            d_s: a + b * b * al,
            n_s: a * qx + g * qy + b * b * al * qy + b * x,
            d_b: 2.0 * b * s * al,
            n_b: 2.0 * b * s * al * qy + s * x,
            d_g: s + al,
            n_g: s * qx + (s + al) * qy,
            d_bb: 2.0 * s * al,
            n_bb: 2.0 * s * al * qy,
            d_sb: 2.0 * b * al,
            n_sb: 2.0 * b * al * qy + x,
            d_sg: 1.0,
            n_sg: qx + qy,
            d_bg: 0.0,
            n_bg: 0.0,
        }
    }

    pub fn d(&self) -> f64 {
        self.d
    }

    pub fn value(&self) -> f64 {
        self.d.ln() - self.n / self.d
    }

    fn first(&self, du: f64, nu: f64) -> f64 {
        du / self.d - (nu * self.d - self.n * du) / (self.d * self.d)
    }

    fn second(&self, du: f64, nu: f64, dv: f64, nv: f64, duv: f64, nuv: f64) -> f64 {
        let d = self.d;
        let n = self.n;
        let d2 = d * d;
        duv / d - du * dv / d2 - nuv / d + (nu * dv + nv * du) / d2 + n * duv / d2
            - 2.0 * n * du * dv / (d2 * d)
    }

    pub fn ds(&self) -> f64 {
        self.first(self.d_s, self.n_s)
    }

    pub fn db(&self) -> f64 {
        self.first(self.d_b, self.n_b)
    }

    pub fn dg(&self) -> f64 {
        self.first(self.d_g, self.n_g)
    }

    pub fn dss(&self) -> f64 {
        self.second(self.d_s, self.n_s, self.d_s, self.n_s, 0.0, 0.0)
    }

    pub fn dbb(&self) -> f64 {
        self.second(self.d_b, self.n_b, self.d_b, self.n_b, self.d_bb, self.n_bb)
    }

    pub fn dsb(&self) -> f64 {
        self.second(self.d_s, self.n_s, self.d_b, self.n_b, self.d_sb, self.n_sb)
    }

    pub fn dgg(&self) -> f64 {
        self.second(self.d_g, self.n_g, self.d_g, self.n_g, 0.0, 0.0)
    }

    pub fn dsg(&self) -> f64 {
        self.second(self.d_s, self.n_s, self.d_g, self.n_g, self.d_sg, self.n_sg)
    }

    pub fn dbg(&self) -> f64 {
        self.second(self.d_b, self.n_b, self.d_g, self.n_g, self.d_bg, self.n_bg)
    }
}

/// `ℓ_i` for a single component.
pub fn ell(s: f64, b: f64, noise: &Noise, st: &ComponentStats) -> f64 {
    ComponentTerm::new(s, b, noise, st).value()
}

pub fn projected_stats(
    w: &StiefelPoint,
    c: &StiefelPoint,
    moments: &SampleMoments,
    sigma_e2: f64,
    sigma_f2: f64,
) -> Result<ProjectedStats> {
    check_dims(w.matrix(), c.matrix(), moments)?;
    Ok(Projection::new(w.matrix(), c.matrix(), moments).stats(sigma_e2, sigma_f2))
}

fn check_dims(w: &DMatrix<f64>, c: &DMatrix<f64>, moments: &SampleMoments) -> Result<()> {
    if w.nrows() != moments.p() || c.nrows() != moments.q() || w.ncols() != c.ncols() {
        return Err(PplsError::Dimension(format!(
            "loadings {}x{} and {}x{} do not fit moments with p = {}, q = {}",
            w.nrows(),
            w.ncols(),
            c.nrows(),
            c.ncols(),
            moments.p(),
            moments.q()
        )));
    }
    Ok(())
}

/// Products of the moment blocks with the loadings, shared by the objective
/// and the loading gradients.
#[derive(Debug, Clone)]
pub(crate) struct Projection {
    pub sxx_w: DMatrix<f64>,
    pub syy_c: DMatrix<f64>,
    pub sxy_c: DMatrix<f64>,
    pub syx_w: DMatrix<f64>,
    wsxxw: DVector<f64>,
    csyyc: DVector<f64>,
    wsxyc: DVector<f64>,
    tr_sxx: f64,
    tr_syy: f64,
}

/// The products `Sxx W`, `Syy C` and `Sxy C`, which fix the objective value.
#[derive(Debug, Clone)]
pub struct LoadingProducts {
    pub sxx_w: DMatrix<f64>,
    pub syy_c: DMatrix<f64>,
    pub sxy_c: DMatrix<f64>,
}

impl LoadingProducts {
    pub fn new(w: &DMatrix<f64>, c: &DMatrix<f64>, m: &SampleMoments) -> Self {
        LoadingProducts {
            sxx_w: &m.sxx * w,
            syy_c: &m.syy * c,
            sxy_c: &m.sxy * c,
        }
    }

    /// Projected statistics at the loadings the products were formed from.
    pub fn stats(
        &self,
        w: &DMatrix<f64>,
        c: &DMatrix<f64>,
        m: &SampleMoments,
        sigma_e2: f64,
        sigma_f2: f64,
    ) -> ProjectedStats {
        let r = w.ncols();
        let wsxxw = DVector::from_fn(r, |i, _| w.column(i).dot(&self.sxx_w.column(i)));
        let csyyc = DVector::from_fn(r, |i, _| c.column(i).dot(&self.syy_c.column(i)));
        let wsxyc = DVector::from_fn(r, |i, _| w.column(i).dot(&self.sxy_c.column(i)));
        let sef = (sigma_e2 * sigma_f2).sqrt();
        ProjectedStats {
            qx: &wsxxw / sigma_e2,
            qy: &csyyc / sigma_f2,
            qxy: &wsxyc * (2.0 / sef),
            tr_sxx: m.sxx.trace(),
            tr_syy: m.syy.trace(),
            p: w.nrows(),
            q: c.nrows(),
            sigma_e2,
            sigma_f2,
        }
    }

    /// Negates the `C` products of component `i`, matching a flip of `c_i`.
    pub fn flip_c(&mut self, i: usize) {
        self.syy_c.column_mut(i).neg_mut();
        self.sxy_c.column_mut(i).neg_mut();
    }

    /// Reorders columns as `out[k] = in[perm[k]]`, negating where `flips[k]`.
    pub fn permute_and_flip(&self, perm: &[usize], flips: &[bool]) -> Self {
        let f = |m: &DMatrix<f64>| {
            DMatrix::from_fn(m.nrows(), perm.len(), |row, k| {
                let v = m[(row, perm[k])];
                if flips[k] {
                    -v
                } else {
                    v
                }
            })
        };
        LoadingProducts {
            sxx_w: f(&self.sxx_w),
            syy_c: f(&self.syy_c),
            sxy_c: f(&self.sxy_c),
        }
    }
}

impl Projection {
    pub fn new(w: &DMatrix<f64>, c: &DMatrix<f64>, m: &SampleMoments) -> Self {
        let sxx_w = &m.sxx * w;
        let syy_c = &m.syy * c;
        let sxy_c = &m.sxy * c;
        let syx_w = m.sxy.tr_mul(w);
        let r = w.ncols();
        let wsxxw = DVector::from_fn(r, |i, _| w.column(i).dot(&sxx_w.column(i)));
        let csyyc = DVector::from_fn(r, |i, _| c.column(i).dot(&syy_c.column(i)));
        let wsxyc = DVector::from_fn(r, |i, _| w.column(i).dot(&sxy_c.column(i)));
        Projection {
            sxx_w,
            syy_c,
            sxy_c,
            syx_w,
            wsxxw,
            csyyc,
            wsxyc,
            tr_sxx: m.sxx.trace(),
            tr_syy: m.syy.trace(),
        }
    }

    /// Builds the projection from precomputed `Sxx W`, `Syy C` and `Sxy C`.
    pub fn from_products(
        w: &DMatrix<f64>,
        c: &DMatrix<f64>,
        m: &SampleMoments,
        products: LoadingProducts,
    ) -> Self {
        let LoadingProducts { sxx_w, syy_c, sxy_c } = products;
        let syx_w = m.sxy.tr_mul(w);
        let r = w.ncols();
        let wsxxw = DVector::from_fn(r, |i, _| w.column(i).dot(&sxx_w.column(i)));
        let csyyc = DVector::from_fn(r, |i, _| c.column(i).dot(&syy_c.column(i)));
        let wsxyc = DVector::from_fn(r, |i, _| w.column(i).dot(&sxy_c.column(i)));
        Projection {
            sxx_w,
            syy_c,
            sxy_c,
            syx_w,
            wsxxw,
            csyyc,
            wsxyc,
            tr_sxx: m.sxx.trace(),
            tr_syy: m.syy.trace(),
        }
    }

    pub fn products(self) -> LoadingProducts {
        LoadingProducts {
            sxx_w: self.sxx_w,
            syy_c: self.syy_c,
            sxy_c: self.sxy_c,
        }
    }

    pub fn stats(&self, sigma_e2: f64, sigma_f2: f64) -> ProjectedStats {
        let sef = (sigma_e2 * sigma_f2).sqrt();
        ProjectedStats {
            qx: &self.wsxxw / sigma_e2,
            qy: &self.csyyc / sigma_f2,
            qxy: &self.wsxyc * (2.0 / sef),
            tr_sxx: self.tr_sxx,
            tr_syy: self.tr_syy,
            p: self.sxx_w.nrows(),
            q: self.syy_c.nrows(),
            sigma_e2,
            sigma_f2,
        }
    }

    /// Euclidean gradients of the objective in `W` and `C`.
    pub fn grads(&self, coeffs: &ComponentCoeffs, noise: &Noise) -> (DMatrix<f64>, DMatrix<f64>) {
        let se2 = noise.sigma_e2;
        let sf2 = noise.sigma_f2;
        let sef = (se2 * sf2).sqrt();
        let r = coeffs.d.len();
        let mut gw = DMatrix::zeros(self.sxx_w.nrows(), r);
        let mut gc = DMatrix::zeros(self.syy_c.nrows(), r);
        for i in 0..r {
            let fx = -2.0 * coeffs.phi_x[i] / se2;
            let fy = -2.0 * coeffs.phi_y[i] / sf2;
            let fxy = -2.0 * coeffs.phi_xy[i] / sef;
            gw.set_column(i, &(self.sxx_w.column(i) * fx + self.sxy_c.column(i) * fxy));
            gc.set_column(i, &(self.syy_c.column(i) * fy + self.syx_w.column(i) * fxy));
        }
        (gw, gc)
    }
}

pub fn component_coeffs(params: &PplsParams) -> ComponentCoeffs {
    coeffs_from(&params.theta_t2, &params.b, &Noise::of(params))
}

pub(crate) fn coeffs_from(theta: &DVector<f64>, b: &DVector<f64>, noise: &Noise) -> ComponentCoeffs {
    let r = theta.len();
    let (se2, sf2, sh2) = (noise.sigma_e2, noise.sigma_f2, noise.sigma_h2);
    let sef = (se2 * sf2).sqrt();
    let mut d = DVector::zeros(r);
    let mut phi_x = DVector::zeros(r);
    let mut phi_y = DVector::zeros(r);
    let mut phi_xy = DVector::zeros(r);
    for i in 0..r {
        let s = theta[i];
        let bi = b[i];
        let di = (sf2 + sh2) * (s + se2) + bi * bi * s * se2;
        d[i] = di;
        phi_x[i] = 1.0 - se2 * (sf2 + sh2 + bi * bi * s) / di;
        phi_y[i] = 1.0 - sf2 * (se2 + s) / di;
        phi_xy[i] = sef * bi * s / di;
    }
    ComponentCoeffs {
        d,
        phi_x,
        phi_y,
        phi_xy,
    }
}

/// Objective from precomputed statistics.
pub fn nll_from_stats(
    theta: &DVector<f64>,
    b: &DVector<f64>,
    noise: &Noise,
    stats: &ProjectedStats,
) -> Result<NllParts> {
    let r = stats.r();
    let offset = stats.offset();
    if !offset.is_finite() {
        return Err(PplsError::Numerical(format!(
            "noise/trace offset is non-finite ({offset})"
        )));
    }
    let mut ell = DVector::zeros(r);
    for i in 0..r {
        let v = ComponentTerm::new(theta[i], b[i], noise, &stats.component(i)).value();
        if !v.is_finite() {
            return Err(PplsError::Numerical(format!(
                "component {i} term is non-finite ({v})"
            )));
        }
        ell[i] = v;
    }
    Ok(NllParts {
        total: offset + ell.sum(),
        offset,
        ell,
    })
}

pub fn scalar_nll_parts(params: &PplsParams, moments: &SampleMoments) -> Result<NllParts> {
    let stats = projected_stats(
        &params.w,
        &params.c,
        moments,
        params.sigma_e2,
        params.sigma_f2,
    )?;
    nll_from_stats(&params.theta_t2, &params.b, &Noise::of(params), &stats)
}

pub fn scalar_nll(params: &PplsParams, moments: &SampleMoments) -> Result<f64> {
    Ok(scalar_nll_parts(params, moments)?.total)
}

/// `ln det Σ + tr(S Σ⁻¹)` on the dense `(p+q)`-dimensional covariance.
/// Kept as a reference implementation; it is never used inside the solvers.
pub fn dense_nll(params: &PplsParams, moments: &SampleMoments) -> Result<f64> {
    let sigma = assemble_joint_cov(params);
    let s = moments.joint();
    if s.shape() != sigma.shape() {
        return Err(PplsError::Dimension("moments do not match parameters".into()));
    }
    let chol = sigma
        .cholesky()
        .ok_or_else(|| PplsError::Definiteness("joint covariance Cholesky failed".into()))?;
    let l = chol.l_dirty();
    let logdet = 2.0 * (0..l.nrows()).map(|i| l[(i, i)].ln()).sum::<f64>();
    let trace = chol.solve(&s).trace();
    Ok(logdet + trace)
}

/// Euclidean gradients `(G_W, G_C)` of the objective in the loading matrices.
pub fn euclid_grads(
    params: &PplsParams,
    moments: &SampleMoments,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    check_dims(params.w.matrix(), params.c.matrix(), moments)?;
    let proj = Projection::new(params.w.matrix(), params.c.matrix(), moments);
    Ok(proj.grads(&component_coeffs(params), &Noise::of(params)))
}

/// Gradient in log coordinates `(ln θ²_1, ln b_1, …, ln θ²_r, ln b_r, ln σ_h²)`.
pub fn scalar_block_grads(params: &PplsParams, stats: &ProjectedStats) -> DVector<f64> {
    log_grads(&params.theta_t2, &params.b, &Noise::of(params), stats)
}

pub(crate) fn log_grads(
    theta: &DVector<f64>,
    b: &DVector<f64>,
    noise: &Noise,
    stats: &ProjectedStats,
) -> DVector<f64> {
    let r = stats.r();
    let mut g = DVector::zeros(2 * r + 1);
    let mut dh = 0.0;
    for i in 0..r {
        let term = ComponentTerm::new(theta[i], b[i], noise, &stats.component(i));
        g[2 * i] = theta[i] * term.ds();
        g[2 * i + 1] = b[i] * term.db();
        dh += term.dg();
    }
    g[2 * r] = noise.sigma_h2 * dh;
    g
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{pcca_specialize, sample_dataset, sample_moments, NoiseLaw};
    use crate::rng::RngStream;
    use crate::stiefel::{qr_retract, random_stiefel, tangent_project};
    use crate::testutil::random_instance;
    use rand_distr::{Distribution, StandardNormal};

    #[test]
    fn isotropic_x_block_gives_unit_qx() {
        let (params, mut m) = random_instance(8, 6, 2, 1);
        m.sxx = DMatrix::identity(8, 8) * params.sigma_e2;
        m.sxy = DMatrix::zeros(8, 6);
        let st = projected_stats(&params.w, &params.c, &m, params.sigma_e2, params.sigma_f2).unwrap();
        for i in 0..2 {
            assert!((st.qx[i] - 1.0).abs() < 1e-14);
            assert_eq!(st.qxy[i], 0.0);
        }
    }

    #[test]
    fn loading_products_follow_flips_and_reorders() {
        let (params, m) = random_instance(9, 7, 3, 4);
        let mut c = params.c.clone();
        let mut prod = LoadingProducts::new(params.w.matrix(), c.matrix(), &m);
        c.flip_column(1);
        prod.flip_c(1);
        let perm = [2, 0, 1];
        let flips = [true, false, true];
        let w = params.w.permute_and_flip(&perm, &flips);
        let c = c.permute_and_flip(&perm, &flips);
        let moved = prod.permute_and_flip(&perm, &flips);
        let fresh = LoadingProducts::new(w.matrix(), c.matrix(), &m);
        assert_eq!(moved.sxx_w, fresh.sxx_w);
        assert_eq!(moved.syy_c, fresh.syy_c);
        assert_eq!(moved.sxy_c, fresh.sxy_c);
        let direct = Projection::new(w.matrix(), c.matrix(), &m);
        let rebuilt = Projection::from_products(w.matrix(), c.matrix(), &m, moved);
        assert_eq!(
            direct.stats(params.sigma_e2, params.sigma_f2).qxy,
            rebuilt.stats(params.sigma_e2, params.sigma_f2).qxy
        );
    }

    #[test]
    fn projected_stats_match_dense_diagonals() {
        let (params, m) = random_instance(8, 6, 2, 2);
        let st = projected_stats(&params.w, &params.c, &m, params.sigma_e2, params.sigma_f2).unwrap();
        let w = params.w.matrix();
        let c = params.c.matrix();
        let a = w.transpose() * &m.sxx * w;
        let b = c.transpose() * &m.syy * c;
        let x = w.transpose() * &m.sxy * c;
        let sef = (params.sigma_e2 * params.sigma_f2).sqrt();
        for i in 0..2 {
            assert!((st.qx[i] - a[(i, i)] / params.sigma_e2).abs() <= 1e-13);
            assert!((st.qy[i] - b[(i, i)] / params.sigma_f2).abs() <= 1e-13);
            assert!((st.qxy[i] - 2.0 * x[(i, i)] / sef).abs() <= 1e-13);
        }
        let bad = SampleMoments {
            sxx: DMatrix::zeros(7, 7),
            ..m.clone()
        };
        assert!(matches!(
            projected_stats(&params.w, &params.c, &bad, 1.0, 1.0),
            Err(PplsError::Dimension(_))
        ));
    }

    #[test]
    fn coeffs_by_substitution() {
        let (mut params, _) = random_instance(4, 4, 1, 3);
        params.theta_t2[0] = 1.0;
        params.b[0] = 1.0;
        params.sigma_e2 = 1.0;
        params.sigma_f2 = 1.0;
        params.sigma_h2 = 0.0;
        let k = component_coeffs(&params);
        assert!((k.d[0] - 3.0).abs() < 1e-15);
        for v in [k.phi_x[0], k.phi_y[0], k.phi_xy[0]] {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        params.b[0] = 1e-12;
        assert!(component_coeffs(&params).phi_xy[0] < 1e-11);
    }

    #[test]
    fn pcca_d_reduces() {
        let (params, _) = random_instance(6, 5, 2, 4);
        let pc = pcca_specialize(&params);
        let k = component_coeffs(&pc);
        for i in 0..2 {
            let s = pc.theta_t2[i];
            let expect = s * (pc.sigma_f2 + pc.sigma_e2) + pc.sigma_f2 * pc.sigma_e2;
            assert!((k.d[i] - expect).abs() < 1e-14);
        }
    }

    #[test]
    fn scalar_matches_dense_on_random_instance() {
        let (params, m) = random_instance(10, 8, 3, 5);
        let s = scalar_nll(&params, &m).unwrap();
        let d = dense_nll(&params, &m).unwrap();
        assert!((s - d).abs() / (1.0 + d.abs()) < 1e-10, "{s} vs {d}");
    }

    #[test]
    fn population_value_is_logdet_plus_dimension() {
        let (params, _) = random_instance(9, 7, 2, 6);
        let m = SampleMoments::population(&params, 100);
        let s = scalar_nll(&params, &m).unwrap();
        let logdet = assemble_joint_cov(&params).cholesky().unwrap().ln_determinant();
        assert!((s - logdet - 16.0).abs() < 1e-10);
        assert!((dense_nll(&params, &m).unwrap() - logdet - 16.0).abs() < 1e-10);
    }

    #[test]
    fn value_is_sensitive_to_theta() {
        let (mut params, m) = random_instance(6, 6, 2, 7);
        let a = scalar_nll(&params, &m).unwrap();
        params.theta_t2[0] *= 2.0;
        assert!((scalar_nll(&params, &m).unwrap() - a).abs() > 1e-6);
    }

    #[test]
    fn smallest_instance_by_hand() {
        // p = q = 2, r = 1, W = C = e1: Σ is block 2x2 diagonal in coordinates (x1, y1) and (x2, y2).
        let w = StiefelPoint::identity_block(2, 1).unwrap();
        let params = PplsParams::new(
            w.clone(),
            w,
            DVector::from_element(1, 0.8),
            DVector::from_element(1, 1.5),
            0.4,
            0.3,
            0.2,
        )
        .unwrap();
        let sxx = DMatrix::from_row_slice(2, 2, &[2.0, 0.1, 0.1, 0.5]);
        let syy = DMatrix::from_row_slice(2, 2, &[1.5, -0.2, -0.2, 0.6]);
        let sxy = DMatrix::from_row_slice(2, 2, &[0.9, 0.05, 0.0, 0.1]);
        let m = SampleMoments {
            sxx,
            syy,
            sxy,
            n: 10,
            mean_x: DVector::zeros(2),
            mean_y: DVector::zeros(2),
        };
        // Block for (x1, y1): [[s+α, bs], [bs, b²s+γ+β]]; the (x2, y2) block is diag(α, β).
        let (s, b, al, be, ga): (f64, f64, f64, f64, f64) = (1.5, 0.8, 0.4, 0.3, 0.2);
        let a11 = s + al;
        let a12 = b * s;
        let a22 = b * b * s + ga + be;
        let det = a11 * a22 - a12 * a12;
        let quad = (a22 * 2.0 - 2.0 * a12 * 0.9 + a11 * 1.5) / det;
        let hand = det.ln() + al.ln() + be.ln() + quad + 0.5 / al + 0.6 / be;
        let dense = dense_nll(&params, &m).unwrap();
        let scalar = scalar_nll(&params, &m).unwrap();
        assert!((dense - hand).abs() < 1e-13, "{dense} vs {hand}");
        assert!((scalar - hand).abs() < 1e-13);
    }

    #[test]
    fn dense_trace_scales_linearly() {
        let (params, m) = random_instance(6, 5, 2, 8);
        let logdet = assemble_joint_cov(&params).cholesky().unwrap().ln_determinant();
        let t1 = dense_nll(&params, &m).unwrap() - logdet;
        let scaled = SampleMoments {
            sxx: &m.sxx * 3.0,
            syy: &m.syy * 3.0,
            sxy: &m.sxy * 3.0,
            ..m.clone()
        };
        let t3 = dense_nll(&params, &scaled).unwrap() - logdet;
        assert!((t3 - 3.0 * t1).abs() < 1e-12 * t3.abs());
    }

    #[test]
    fn separability_and_permutation_equivariance() {
        let (params, m) = random_instance(8, 7, 3, 9);
        let parts = scalar_nll_parts(&params, &m).unwrap();
        assert_eq!(parts.total, parts.offset + parts.ell.sum());
        let perm = [1, 2, 0];
        let flips = [false; 3];
        let moved = PplsParams {
            w: params.w.permute_and_flip(&perm, &flips),
            c: params.c.permute_and_flip(&perm, &flips),
            b: DVector::from_iterator(3, perm.iter().map(|&k| params.b[k])),
            theta_t2: DVector::from_iterator(3, perm.iter().map(|&k| params.theta_t2[k])),
            ..params.clone()
        };
        let p2 = scalar_nll_parts(&moved, &m).unwrap();
        for k in 0..3 {
            assert!((p2.ell[k] - parts.ell[perm[k]]).abs() < 1e-12);
        }
    }

    #[test]
    fn gradient_substitution_for_isotropic_x() {
        let (params, mut m) = random_instance(7, 5, 2, 10);
        m.sxx = DMatrix::identity(7, 7) * params.sigma_e2;
        m.sxy = DMatrix::zeros(7, 5);
        let (gw, _) = euclid_grads(&params, &m).unwrap();
        let k = component_coeffs(&params);
        for i in 0..2 {
            let expect = params.w.matrix().column(i) * (-2.0 * k.phi_x[i]);
            assert!((gw.column(i) - expect).amax() < 1e-14);
        }
    }

    #[test]
    fn gradients_match_directional_finite_differences() {
        let (params, m) = random_instance(9, 7, 3, 11);
        let (gw, gc) = euclid_grads(&params, &m).unwrap();
        let mut rng = RngStream::new(12, 0);
        let h = 1e-6;
        for _ in 0..20 {
            let tw = tangent_project(
                &params.w,
                &DMatrix::from_fn(9, 3, |_, _| StandardNormal.sample(&mut rng)),
            )
            .unwrap();
            let tc = tangent_project(
                &params.c,
                &DMatrix::from_fn(7, 3, |_, _| StandardNormal.sample(&mut rng)),
            )
            .unwrap();
            let f = |t: f64| {
                let sign = if t < 0.0 { -1.0 } else { 1.0 };
                let mut moved = params.clone();
                moved.w = qr_retract(&params.w, &scaled(&tw, sign), t.abs()).unwrap();
                moved.c = qr_retract(&params.c, &scaled(&tc, sign), t.abs()).unwrap();
                scalar_nll(&moved, &m).unwrap()
            };
            let fd = (f(h) - f(-h)) / (2.0 * h);
            let an = gw.dot(tw.matrix()) + gc.dot(tc.matrix());
            assert!((fd - an).abs() <= 1e-6 * (1.0 + an.abs()), "{fd} vs {an}");
        }
    }

    fn scaled(t: &crate::stiefel::TangentVector, a: f64) -> crate::stiefel::TangentVector {
        crate::stiefel::TangentVector::from_matrix_unchecked(t.matrix() * a)
    }

    #[test]
    fn log_gradients_match_finite_differences() {
        let (params, m) = random_instance(8, 6, 3, 13);
        let st = projected_stats(&params.w, &params.c, &m, params.sigma_e2, params.sigma_f2).unwrap();
        let g = scalar_block_grads(&params, &st);
        let eval = |p: &PplsParams| nll_from_stats(&p.theta_t2, &p.b, &Noise::of(p), &st).unwrap().total;
        let h = 1e-5;
        for k in 0..7 {
            let bump = |delta: f64| {
                let mut p = params.clone();
                if k == 6 {
                    p.sigma_h2 *= delta.exp();
                } else if k % 2 == 0 {
                    p.theta_t2[k / 2] *= delta.exp();
                } else {
                    p.b[k / 2] *= delta.exp();
                }
                eval(&p)
            };
            let fd = (bump(h) - bump(-h)) / (2.0 * h);
            assert!((fd - g[k]).abs() <= 1e-6 * (1.0 + g[k].abs()), "coordinate {k}: {fd} vs {}", g[k]);
        }
    }

    #[test]
    fn exchangeable_components_have_equal_gradients() {
        let (mut params, _) = random_instance(6, 6, 2, 14);
        params.theta_t2 = DVector::from_element(2, 1.3);
        params.b = DVector::from_element(2, 0.9);
        let st = ProjectedStats {
            qx: DVector::from_element(2, 3.0),
            qy: DVector::from_element(2, 2.5),
            qxy: DVector::from_element(2, 1.7),
            tr_sxx: 5.0,
            tr_syy: 6.0,
            p: 6,
            q: 6,
            sigma_e2: params.sigma_e2,
            sigma_f2: params.sigma_f2,
        };
        let g = scalar_block_grads(&params, &st);
        assert_eq!(g[0], g[2]);
        assert_eq!(g[1], g[3]);
    }

    #[test]
    fn sample_based_moments_agree_with_dense() {
        let (params, _) = random_instance(12, 9, 3, 15);
        let (x, y) = sample_dataset(&params, 40, &NoiseLaw::Gaussian, &mut RngStream::new(1, 0)).unwrap();
        let m = sample_moments(&x, &y).unwrap();
        let w = random_stiefel(12, 3, &mut RngStream::new(2, 0)).unwrap();
        let moved = PplsParams { w, ..params };
        let s = scalar_nll(&moved, &m).unwrap();
        let d = dense_nll(&moved, &m).unwrap();
        assert!((s - d).abs() / (1.0 + d.abs()) < 1e-10);
    }
}
