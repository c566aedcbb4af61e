//! Noise-variance estimates from the eigenvalues of a marginal covariance.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{PplsError, Result};

/// Eigenvalues in `[-NEG_TOL, 0)` are treated as zero.
const NEG_TOL: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "r")]
pub enum NoiseMode {
    Subspace(usize),
    FullSpectrum,
    Conservative(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseEstimate {
    pub value: f64,
    pub mode: NoiseMode,
    /// Zero-based half-open range into the descending spectrum.
    pub eigenvalues_used: (usize, usize),
}

/// Eigenvalues of a symmetric matrix sorted in descending order with the
/// small-negative clamp applied.
pub fn descending_spectrum(s: &DMatrix<f64>) -> Result<Vec<f64>> {
    if !s.is_square() {
        return Err(PplsError::Dimension(format!(
            "covariance must be square, got {}x{}",
            s.nrows(),
            s.ncols()
        )));
    }
    let mut ev: Vec<f64> = s.clone().symmetric_eigenvalues().iter().copied().collect();
    if ev.iter().any(|v| !v.is_finite()) {
        return Err(PplsError::Numerical("non-finite eigenvalue".into()));
    }
    ev.sort_by(|a, b| b.total_cmp(a));
    if let Some(&min) = ev.last() {
        if min < -NEG_TOL {
            return Err(PplsError::Input(format!(
                "covariance has a negative eigenvalue {min:e}"
            )));
        }
    }
    for v in ev.iter_mut() {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
    Ok(ev)
}

/// Mean of the trailing `d − r` eigenvalues of a descending spectrum.
pub fn tail_mean(spectrum: &[f64], r: usize) -> Result<f64> {
    let d = spectrum.len();
    if r >= d {
        return Err(PplsError::Rank(format!("need r < d, got r = {r}, d = {d}")));
    }
    Ok(spectrum[r..].iter().sum::<f64>() / (d - r) as f64)
}

/// Mean of the smallest `d − r` eigenvalues of `s`.
pub fn noise_subspace_estimate(s: &DMatrix<f64>, r: usize) -> Result<NoiseEstimate> {
    if r >= s.nrows() {
        return Err(PplsError::Rank(format!(
            "need r < d, got r = {r}, d = {}",
            s.nrows()
        )));
    }
    let spectrum = descending_spectrum(s)?;
    Ok(NoiseEstimate {
        value: tail_mean(&spectrum, r)?,
        mode: NoiseMode::Subspace(r),
        eigenvalues_used: (r, spectrum.len()),
    })
}

/// `tr(S) / d`.
pub fn full_spectrum_estimate(s: &DMatrix<f64>) -> Result<NoiseEstimate> {
    if !s.is_square() || s.nrows() == 0 {
        return Err(PplsError::Dimension("covariance must be square and non-empty".into()));
    }
    let d = s.nrows();
    Ok(NoiseEstimate {
        value: s.trace() / d as f64,
        mode: NoiseMode::FullSpectrum,
        eigenvalues_used: (0, d),
    })
}

/// Subspace estimate at the largest candidate rank.
pub fn conservative_estimate(s: &DMatrix<f64>, r_max: usize) -> Result<NoiseEstimate> {
    let est = noise_subspace_estimate(s, r_max)?;
    Ok(NoiseEstimate {
        mode: NoiseMode::Conservative(r_max),
        ..est
    })
}

/// Index `k` (1-based rank) in `[lo, hi]` maximizing `λ_k − λ_{k+1}`. Ties go to the smaller rank.
pub fn eigen_gap_rank(spectrum: &[f64], lo: usize, hi: usize) -> Result<usize> {
    if lo == 0 || hi < lo || hi >= spectrum.len() {
        return Err(PplsError::Config(format!(
            "gap range [{lo}, {hi}] invalid for a spectrum of length {}",
            spectrum.len()
        )));
    }
    let mut best = lo;
    let mut best_gap = f64::NEG_INFINITY;
    for k in lo..=hi {
        let gap = spectrum[k - 1] - spectrum[k];
        if gap > best_gap {
            best_gap = gap;
            best = k;
        }
    }
    Ok(best)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{PplsParams, SampleMoments};
    use crate::rng::RngStream;
    use crate::stiefel::random_stiefel;
    use nalgebra::DVector;

    #[test]
    fn flat_spectrum() {
        let s = DMatrix::identity(6, 6) * 0.7;
        for r in 0..6 {
            assert!((noise_subspace_estimate(&s, r).unwrap().value - 0.7).abs() < 1e-15);
        }
        assert!((full_spectrum_estimate(&s).unwrap().value - 0.7).abs() < 1e-15);
    }

    #[test]
    fn hand_spectrum() {
        let s = DMatrix::from_diagonal(&DVector::from_vec(vec![5.0, 3.0, 1.0, 1.0, 1.0]));
        let est = noise_subspace_estimate(&s, 2).unwrap();
        assert!((est.value - 1.0).abs() < 1e-14);
        assert_eq!(est.eigenvalues_used, (2, 5));
        assert!(matches!(noise_subspace_estimate(&s, 5), Err(PplsError::Rank(_))));
    }

    #[test]
    fn full_spectrum_is_subspace_at_zero() {
        let a = DMatrix::from_fn(5, 5, |i, j| ((i * 3 + j * 7) % 5) as f64 - 2.0);
        let s = &a * a.transpose();
        let f = full_spectrum_estimate(&s).unwrap().value;
        let z = noise_subspace_estimate(&s, 0).unwrap().value;
        assert!((f - z).abs() <= 1e-12 * f);
    }

    #[test]
    fn negative_eigenvalue_rejected() {
        let s = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, -1e-3]));
        assert!(matches!(noise_subspace_estimate(&s, 0), Err(PplsError::Input(_))));
        let s = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, -1e-9]));
        assert_eq!(noise_subspace_estimate(&s, 1).unwrap().value, 0.0);
    }

    fn spiked_population(p: usize, theta: &[f64], sigma2: f64) -> DMatrix<f64> {
        let r = theta.len();
        let mut rng = RngStream::new(77, 0);
        let w = random_stiefel(p, r, &mut rng).unwrap();
        let c = random_stiefel(p, r, &mut rng).unwrap();
        let params = PplsParams::new(
            w,
            c,
            DVector::from_element(r, 1.0),
            DVector::from_row_slice(theta),
            sigma2,
            sigma2,
            0.1,
        )
        .unwrap();
        SampleMoments::population(&params, 0).sxx
    }

    #[test]
    fn population_full_spectrum_bias() {
        let s = spiked_population(50, &[2.0, 1.8, 1.6, 1.4, 1.2], 0.5);
        let v = full_spectrum_estimate(&s).unwrap().value;
        assert!((v - 0.66).abs() < 1e-12);
    }

    #[test]
    fn population_rank_misspecification() {
        let theta = [2.0, 1.8, 1.6, 1.4, 1.2];
        let p = 30;
        let s = spiked_population(p, &theta, 0.5);
        let mut prev = f64::INFINITY;
        for rt in 0..=12 {
            let v = noise_subspace_estimate(&s, rt).unwrap().value;
            if rt >= 5 {
                assert!((v - 0.5).abs() < 1e-12, "r~ = {rt}: {v}");
                assert_eq!(conservative_estimate(&s, rt).unwrap().value, v);
            } else {
                let extra: f64 = theta[rt..].iter().sum::<f64>() / (p - rt) as f64;
                assert!((v - 0.5 - extra).abs() < 1e-12, "r~ = {rt}");
            }
            assert!(v <= prev + 1e-14);
            prev = v;
        }
    }

    #[test]
    fn gap_rank_picks_largest_drop() {
        let spec = [10.0, 9.0, 8.5, 2.0, 1.9, 1.8];
        assert_eq!(eigen_gap_rank(&spec, 1, 5).unwrap(), 3);
        assert_eq!(eigen_gap_rank(&spec, 1, 2).unwrap(), 1);
    }
}
