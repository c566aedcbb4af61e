//! Per-component Fisher blocks and analytic standard errors for the scalar
//! parameters. Loadings are treated as known, and the coupling between
//! components is ignored.

use nalgebra::Matrix2;

use crate::model::PplsParams;
use crate::objective::{ComponentTerm, Noise, ProjectedStats};

/// Blocks with condition number above this report undefined SEs.
pub const MAX_CONDITION: f64 = 1e12;

/// `J_i = ½ ∇²ℓ_i` in `(θ²_i, b_i)` and `J_{σ_h} = ½ Σ_i ∂²ℓ_i/∂(σ_h²)²`.
#[derive(Debug, Clone, PartialEq)]
pub struct FisherInfo {
    pub blocks: Vec<Matrix2<f64>>,
    pub j_sigma_h: f64,
}

pub fn fisher_block(params: &PplsParams, stats: &ProjectedStats, i: usize) -> Matrix2<f64> {
    let t = ComponentTerm::new(params.theta_t2[i], params.b[i], &Noise::of(params), &stats.component(i));
    let off = 0.5 * t.dsb();
    Matrix2::new(0.5 * t.dss(), off, off, 0.5 * t.dbb())
}

pub fn fisher_info(params: &PplsParams, stats: &ProjectedStats) -> FisherInfo {
    let noise = Noise::of(params);
    let blocks = (0..params.r()).map(|i| fisher_block(params, stats, i)).collect();
    let j_sigma_h = 0.5
        * (0..params.r())
            .map(|i| ComponentTerm::new(params.theta_t2[i], params.b[i], &noise, &stats.component(i)).dgg())
            .sum::<f64>();
    FisherInfo { blocks, j_sigma_h }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComponentSe {
    pub theta_t2: Option<f64>,
    pub b: Option<f64>,
    pub condition: f64,
    pub diagnostic: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StandardErrors {
    pub components: Vec<ComponentSe>,
    pub sigma_h2: Option<f64>,
}

/// Square roots of the diagonal of `N⁻¹ J_i⁻¹`, and `(N J_{σ_h})^{-1/2}`.
/// Under the PCCA restriction only `θ²` is free and uses `(N J_i[0,0])^{-1/2}`.
pub fn standard_errors(params: &PplsParams, stats: &ProjectedStats, n: usize) -> StandardErrors {
    let info = fisher_info(params, stats);
    let nf = n as f64;
    let components = info
        .blocks
        .iter()
        .enumerate()
        .map(|(i, j)| {
            if params.pcca {
                let ok = j[(0, 0)] > 0.0;
                return ComponentSe {
                    theta_t2: ok.then(|| (1.0 / (nf * j[(0, 0)])).sqrt()),
                    b: None,
                    condition: 1.0,
                    diagnostic: (!ok).then(|| format!("component {i}: J_ss = {:e} is not positive", j[(0, 0)])),
                };
            }
            let (lo, hi) = sym2_eigen(j);
            let condition = if lo > 0.0 { hi / lo } else { f64::INFINITY };
            if !(lo > 0.0) || condition > MAX_CONDITION {
                return ComponentSe {
                    theta_t2: None,
                    b: None,
                    condition,
                    diagnostic: Some(format!(
                        "component {i}: Fisher block not invertible (eigenvalues {lo:e}, {hi:e}; condition {condition:e})"
                    )),
                };
            }
            let det = j[(0, 0)] * j[(1, 1)] - j[(0, 1)] * j[(1, 0)];
            ComponentSe {
                theta_t2: Some((j[(1, 1)] / det / nf).sqrt()),
                b: Some((j[(0, 0)] / det / nf).sqrt()),
                condition,
                diagnostic: None,
            }
        })
        .collect();
    let sigma_h2 = (!params.pcca && info.j_sigma_h > 0.0).then(|| (1.0 / (nf * info.j_sigma_h)).sqrt());
    StandardErrors { components, sigma_h2 }
}

fn sym2_eigen(j: &Matrix2<f64>) -> (f64, f64) {
    let (a, b, d) = (j[(0, 0)], j[(0, 1)], j[(1, 1)]);
    let mid = 0.5 * (a + d);
    let rad = (0.25 * (a - d) * (a - d) + b * b).sqrt();
    (mid - rad, mid + rad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{pcca_specialize, SampleMoments};
    use crate::objective::{ell, projected_stats};
    use crate::testutil::random_instance;

    fn fd_hessian(params: &PplsParams, stats: &ProjectedStats, i: usize) -> Matrix2<f64> {
        let noise = Noise::of(params);
        let st = stats.component(i);
        let (s, b) = (params.theta_t2[i], params.b[i]);
        let grad = |s: f64, b: f64| {
            let t = ComponentTerm::new(s, b, &noise, &st);
            (t.ds(), t.db())
        };
        let (hs, hb) = (1e-5 * s, 1e-5 * b);
        let (gsp, gsm) = (grad(s + hs, b), grad(s - hs, b));
        let (gbp, gbm) = (grad(s, b + hb), grad(s, b - hb));
        let jss = (gsp.0 - gsm.0) / (2.0 * hs);
        let jsb = (gbp.0 - gbm.0) / (2.0 * hb);
        let jbb = (gbp.1 - gbm.1) / (2.0 * hb);
        Matrix2::new(jss, jsb, jsb, jbb) * 0.5
    }

    #[test]
    fn blocks_match_finite_differences() {
        for seed in 0..100 {
            let (params, m) = random_instance(9, 8, 2, seed);
            let stats = projected_stats(&params.w, &params.c, &m, params.sigma_e2, params.sigma_f2).unwrap();
            for i in 0..2 {
                let j = fisher_block(&params, &stats, i);
                let fd = fd_hessian(&params, &stats, i);
                assert_eq!(j[(0, 1)], j[(1, 0)]);
                let scale = j.amax().max(1e-12);
                assert!((j - fd).amax() / scale < 1e-5, "seed {seed}: {j} vs {fd}");
            }
        }
    }

    #[test]
    fn exchangeable_components_share_blocks() {
        let (mut params, _) = random_instance(8, 8, 2, 1);
        params.theta_t2.fill(1.5);
        params.b.fill(0.9);
        let m = SampleMoments::population(&params, 500);
        let stats = projected_stats(&params.w, &params.c, &m, params.sigma_e2, params.sigma_f2).unwrap();
        let f = fisher_info(&params, &stats);
        assert!((f.blocks[0] - f.blocks[1]).amax() < 1e-12);
    }

    #[test]
    fn pcca_entry_matches_reduced_objective() {
        let (params, m) = random_instance(9, 7, 2, 4);
        let params = pcca_specialize(&params);
        let stats = projected_stats(&params.w, &params.c, &m, params.sigma_e2, params.sigma_f2).unwrap();
        let noise = Noise::of(&params);
        for i in 0..2 {
            let st = stats.component(i);
            let s = params.theta_t2[i];
            let h = 1e-4 * s;
            let f = |s: f64| ell(s, 1.0, &noise, &st);
            let fd = 0.5 * (f(s + h) - 2.0 * f(s) + f(s - h)) / (h * h);
            let j = fisher_block(&params, &stats, i);
            assert!((j[(0, 0)] - fd).abs() / fd.abs().max(1e-12) < 1e-4);
        }
        let se = standard_errors(&params, &stats, 1000);
        assert!(se.components.iter().all(|c| c.b.is_none()));
        assert!(se.sigma_h2.is_none());
    }

    #[test]
    fn ses_scale_with_sample_size() {
        let (truth, _) = random_instance(10, 9, 2, 2);
        let m = SampleMoments::population(&truth, 1000);
        let stats = projected_stats(&truth.w, &truth.c, &m, truth.sigma_e2, truth.sigma_f2).unwrap();
        let a = standard_errors(&truth, &stats, 1000);
        let b = standard_errors(&truth, &stats, 2000);
        for (x, y) in a.components.iter().zip(&b.components) {
            let ratio = y.theta_t2.unwrap() / x.theta_t2.unwrap();
            assert!((ratio - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-14);
            assert!(x.theta_t2.unwrap() > 0.0 && x.b.unwrap() > 0.0);
        }
        let ratio = b.sigma_h2.unwrap() / a.sigma_h2.unwrap();
        assert!((ratio - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-14);
    }

    #[test]
    fn degenerate_block_reports_undefined() {
        let (mut truth, _) = random_instance(10, 9, 2, 3);
        let m = SampleMoments::population(&truth, 1000);
        let stats = projected_stats(&truth.w, &truth.c, &m, truth.sigma_e2, truth.sigma_f2).unwrap();
        truth.b[1] = 1e-300;
        truth.theta_t2[1] = 1e-300;
        let se = standard_errors(&truth, &stats, 1000);
        assert!(se.components[1].theta_t2.is_none());
        assert!(se.components[1].diagnostic.is_some());
    }
}
