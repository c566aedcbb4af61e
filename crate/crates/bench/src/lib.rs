//! Shared fixtures for the benchmarks.

use ppls_core::model::{sample_dataset, sample_moments, NoiseLaw, PplsParams, SampleMoments};
use ppls_core::pipeline::svd_warm_start;
use ppls_core::spectral::noise_subspace_estimate;
use ppls_core::study::{linspace, synthetic_truth, LOW_NOISE};
use ppls_core::RngStream;

pub struct Problem {
    pub truth: PplsParams,
    pub moments: SampleMoments,
    /// SVD warm start at the estimated noise variances.
    pub init: PplsParams,
}

/// Low-noise synthetic problem with `N = n` rows.
pub fn problem(p: usize, q: usize, r: usize, n: usize, seed: u64) -> Problem {
    let mut rng = RngStream::new(seed, 0);
    let truth = synthetic_truth(p, q, &linspace(2.0, 1.2, r), LOW_NOISE, &mut rng).expect("valid dimensions");
    let (x, y) = sample_dataset(&truth, n, &NoiseLaw::Gaussian, &mut rng).expect("sampling");
    let moments = sample_moments(&x, &y).expect("moments");
    let se2 = noise_subspace_estimate(&moments.sxx, r).expect("noise").value;
    let sf2 = noise_subspace_estimate(&moments.syy, r).expect("noise").value;
    let init = svd_warm_start(&moments, r, se2, sf2).expect("warm start");
    Problem { truth, moments, init }
}
