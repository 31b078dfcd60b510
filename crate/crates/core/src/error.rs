use thiserror::Error;

/// Errors raised by the forward model, bound computations and estimators.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("agent position coincides with anchor {anchor}")]
    SingularGeometry { anchor: usize },

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("Fisher information is singular or ill-conditioned (condition number {condition:e})")]
    UnboundedPose { condition: f64 },

    #[error("design matrix is rank deficient (singular values {singular_values:?})")]
    RankDeficient { singular_values: [f64; 3] },

    #[error("right-hand side has no component in the range of the design matrix")]
    DegenerateRhs,

    #[error("solver failure: {0}")]
    Solver(String),

    #[error("all {runs} estimator runs failed")]
    AllRunsFailed { runs: usize },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn invalid(name: &'static str, reason: impl Into<String>) -> Error {
    Error::InvalidParameter {
        name,
        reason: reason.into(),
    }
}
