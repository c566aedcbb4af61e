//! Fixed-noise probabilistic partial least squares.
//!
//! Noise variances are estimated from the trailing eigenvalues of each view's
//! covariance and then held fixed while the remaining parameters are fitted by
//! minimizing a scalar form of the Gaussian likelihood over orthonormal loadings.

pub mod error;
pub mod inference;
pub mod io;
pub mod model;
pub mod normal;
pub mod objective;
pub mod pipeline;
pub mod predict;
pub mod rng;
pub mod solver;
pub mod spectral;
pub mod stiefel;
pub mod study;
pub mod univariate;

/// Library version.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");

pub use error::{PplsError, Result};
pub use model::{NoiseLaw, PplsParams, SampleMoments};
pub use objective::{ComponentCoeffs, ProjectedStats};
pub use pipeline::{Criterion, MultiStartConfig, PipelineConfig, RankNoise, Transform};
pub use predict::PredictiveLaw;
pub use rng::RngStream;
pub use solver::{FitOptions, FitReport, SolverKind};
pub use spectral::{NoiseEstimate, NoiseMode};
pub use stiefel::{StiefelPoint, TangentVector};
