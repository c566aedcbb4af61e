use thiserror::Error;

/// Errors produced anywhere in the library.
#[derive(Debug, Error)]
pub enum PplsError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid rank: {0}")]
    Rank(String),

    #[error("invalid input: {0}")]
    Input(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("QR retraction failed: W + alpha*xi is rank deficient at alpha = {alpha:e}")]
    Retraction { alpha: f64 },

    #[error("matrix is not positive definite: {0}")]
    Definiteness(String),

    #[error("line search exhausted {backtracks} backtracks (last step {last_step:e})")]
    LineSearch { backtracks: usize, last_step: f64 },

    #[error("no sign change found while bracketing the cubic root after {expansions} expansions")]
    RootBracketing { expansions: usize },

    #[error("degenerate starting point: {0}")]
    DegenerateStart(String),

    #[error("all {starts} starts failed: {diagnostics}")]
    AllStartsFailed { starts: usize, diagnostics: String },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("parse error: {0}")]
    Parse(String),
}

impl PplsError {
    /// True for failures that come from the numerics rather than from the caller's input.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            PplsError::Numerical(_)
                | PplsError::Retraction { .. }
                | PplsError::Definiteness(_)
                | PplsError::LineSearch { .. }
                | PplsError::RootBracketing { .. }
                | PplsError::DegenerateStart(_)
                | PplsError::AllStartsFailed { .. }
        )
    }
}

pub type Result<T> = std::result::Result<T, PplsError>;
