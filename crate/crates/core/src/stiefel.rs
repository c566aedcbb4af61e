//! Geometry of the Stiefel manifold `St(p, r) = { A : AᵀA = I_r }`.
//!
//! Tangent vectors at `W` satisfy `WᵀΞ + ΞᵀW = 0`. The Riemannian gradient under
//! the embedded Euclidean metric is the orthogonal projection
//! `G − W·sym(WᵀG)`, and points are moved with the sign-fixed thin-QR
//! retraction `qf(W + αΞ)` where `diag(R) > 0`.

use nalgebra::DMatrix;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{PplsError, Result};
use crate::rng::RngStream;

/// Maximum entrywise deviation of `WᵀW` from the identity accepted for a point.
pub const ORTHONORMALITY_TOL: f64 = 1e-10;

/// A `p × r` matrix with orthonormal columns, `r < p`.
#[derive(Debug, Clone, PartialEq)]
pub struct StiefelPoint {
    matrix: DMatrix<f64>,
}

/// A `p × r` matrix in the tangent space of some Stiefel point.
#[derive(Debug, Clone, PartialEq)]
pub struct TangentVector {
    matrix: DMatrix<f64>,
}

impl StiefelPoint {
    /// Wraps `matrix`, checking shape and orthonormality.
    pub fn new(matrix: DMatrix<f64>) -> Result<Self> {
        let (p, r) = matrix.shape();
        if r == 0 || r >= p {
            return Err(PplsError::Dimension(format!(
                "Stiefel point needs 0 < r < p, got p = {p}, r = {r}"
            )));
        }
        let dev = orthonormality_defect(&matrix);
        if !(dev <= ORTHONORMALITY_TOL) {
            return Err(PplsError::Input(format!(
                "columns are not orthonormal (max |WᵀW - I| = {dev:e})"
            )));
        }
        Ok(StiefelPoint { matrix })
    }

    /// Q factor of a sign-fixed thin QR of an arbitrary full-column-rank matrix.
    pub fn orthonormalize(matrix: &DMatrix<f64>) -> Result<Self> {
        let (p, r) = matrix.shape();
        if r == 0 || r >= p {
            return Err(PplsError::Dimension(format!(
                "Stiefel point needs 0 < r < p, got p = {p}, r = {r}"
            )));
        }
        let q = sign_fixed_qf(matrix).ok_or_else(|| {
            PplsError::Numerical("matrix is rank deficient; cannot orthonormalize".into())
        })?;
        Ok(StiefelPoint { matrix: q })
    }

    /// Leading `r` columns of `I_p`.
    pub fn identity_block(p: usize, r: usize) -> Result<Self> {
        let mut m = DMatrix::zeros(p, r);
        for k in 0..r.min(p) {
            m[(k, k)] = 1.0;
        }
        StiefelPoint::new(m)
    }

    pub fn p(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn r(&self) -> usize {
        self.matrix.ncols()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.matrix
    }

    /// Reorders and negates columns. `perm[k]` is the source column of column `k`.
    pub fn permute_and_flip(&self, perm: &[usize], flip: &[bool]) -> StiefelPoint {
        let mut out = DMatrix::zeros(self.p(), self.r());
        for (k, &src) in perm.iter().enumerate() {
            let sign = if flip[k] { -1.0 } else { 1.0 };
            out.set_column(k, &(self.matrix.column(src) * sign));
        }
        StiefelPoint { matrix: out }
    }

    /// Negates column `k` in place. Orthonormality is preserved.
    pub fn flip_column(&mut self, k: usize) {
        self.matrix.column_mut(k).neg_mut();
    }
}

impl TangentVector {
    /// Wraps `matrix` after checking it is tangent at `base`.
    pub fn new(base: &StiefelPoint, matrix: DMatrix<f64>) -> Result<Self> {
        if matrix.shape() != base.matrix.shape() {
            return Err(shape_error(base, &matrix));
        }
        let v = TangentVector { matrix };
        let defect = v.skew_defect(base);
        let scale = 1.0 + v.matrix.norm();
        if defect > 1e-10 * scale {
            return Err(PplsError::Input(format!(
                "matrix is not tangent at the base point (|WᵀΞ + ΞᵀW| = {defect:e})"
            )));
        }
        Ok(v)
    }

    pub fn zeros(p: usize, r: usize) -> Self {
        TangentVector {
            matrix: DMatrix::zeros(p, r),
        }
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.matrix
    }

    /// Max-abs entry of `WᵀΞ + ΞᵀW`.
    pub fn skew_defect(&self, base: &StiefelPoint) -> f64 {
        let wt_xi = base.matrix.transpose() * &self.matrix;
        (&wt_xi + wt_xi.transpose()).amax()
    }

    pub(crate) fn from_matrix_unchecked(matrix: DMatrix<f64>) -> Self {
        TangentVector { matrix }
    }
}

/// Max-abs entry of `AᵀA − I`.
pub fn orthonormality_defect(a: &DMatrix<f64>) -> f64 {
    let r = a.ncols();
    let gram = a.transpose() * a;
    (gram - DMatrix::<f64>::identity(r, r)).amax()
}

/// Projects an ambient `p × r` matrix onto the tangent space at `w`:
/// `G − W·sym(WᵀG)`.
pub fn tangent_project(w: &StiefelPoint, g: &DMatrix<f64>) -> Result<TangentVector> {
    if g.shape() != w.matrix.shape() {
        return Err(shape_error(w, g));
    }
    Ok(TangentVector {
        matrix: project_raw(&w.matrix, g),
    })
}

pub(crate) fn project_raw(w: &DMatrix<f64>, g: &DMatrix<f64>) -> DMatrix<f64> {
    let wt_g = w.transpose() * g;
    let sym = (&wt_g + wt_g.transpose()) * 0.5;
    g - w * sym
}

/// `qf(W + αΞ)` with `diag(R) > 0`.
pub fn qr_retract(w: &StiefelPoint, xi: &TangentVector, alpha: f64) -> Result<StiefelPoint> {
    if xi.matrix.shape() != w.matrix.shape() {
        return Err(shape_error(w, &xi.matrix));
    }
    if !(alpha >= 0.0) || !alpha.is_finite() {
        return Err(PplsError::Input(format!(
            "retraction step must be finite and non-negative, got {alpha}"
        )));
    }
    if alpha == 0.0 {
        return Ok(w.clone());
    }
    let moved = &w.matrix + &xi.matrix * alpha;
    let q = sign_fixed_qf(&moved).ok_or(PplsError::Retraction { alpha })?;
    Ok(StiefelPoint { matrix: q })
}

/// Sign-fixed Q factor of a Gaussian `p × r` matrix.
pub fn random_stiefel(p: usize, r: usize, rng: &mut RngStream) -> Result<StiefelPoint> {
    if r == 0 || r >= p {
        return Err(PplsError::Dimension(format!(
            "random Stiefel point needs 0 < r < p, got p = {p}, r = {r}"
        )));
    }
    loop {
        let g = DMatrix::from_fn(p, r, |_, _| StandardNormal.sample(rng));
        // A Gaussian matrix is rank deficient with probability zero; retry anyway.
        if let Some(q) = sign_fixed_qf(&g) {
            return Ok(StiefelPoint { matrix: q });
        }
    }
}

/// Thin QR with column signs chosen so that `diag(R) > 0`. Returns `None` when
/// the matrix is numerically rank deficient. A second QR pass is applied if the
/// first result drifts past the orthonormality tolerance.
pub(crate) fn sign_fixed_qf(m: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let scale = m.norm();
    if !scale.is_finite() || scale == 0.0 {
        return None;
    }
    let (mut q, diag) = thin_qr(m);
    let rank_tol = 1e-12 * scale;
    if diag.iter().any(|d| d.abs() <= rank_tol) {
        return None;
    }
    if orthonormality_defect(&q) > ORTHONORMALITY_TOL {
        let (q2, _) = thin_qr(&q);
        q = q2;
    }
    Some(q)
}

fn thin_qr(m: &DMatrix<f64>) -> (DMatrix<f64>, Vec<f64>) {
    let r_cols = m.ncols();
    let qr = m.clone().qr();
    let mut q = qr.q();
    let r = qr.r();
    let mut diag = Vec::with_capacity(r_cols);
    for k in 0..r_cols {
        let d = r[(k, k)];
        if d < 0.0 {
            q.column_mut(k).neg_mut();
        }
        diag.push(d.abs());
    }
    (q, diag)
}

fn shape_error(w: &StiefelPoint, g: &DMatrix<f64>) -> PplsError {
    PplsError::Dimension(format!(
        "expected a {}x{} matrix, got {}x{}",
        w.p(),
        w.r(),
        g.nrows(),
        g.ncols()
    ))
}
