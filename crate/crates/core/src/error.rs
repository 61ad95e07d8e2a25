use thiserror::Error;

use crate::kron::VarianceComponents;

/// Errors produced by layout validation, estimation and prediction.
#[derive(Debug, Error)]
pub enum Error {
    #[error("{axis} index {index} out of range (size {size})")]
    IndexOutOfRange {
        axis: &'static str,
        index: usize,
        size: usize,
    },

    #[error("invalid layout: {0}")]
    InvalidLayout(String),

    #[error("dimension mismatch for {what}: expected {expected}, got {actual}")]
    DimensionMismatch {
        what: String,
        expected: String,
        actual: String,
    },

    #[error("non-finite value at flat position {0}")]
    NonFinite(usize),

    #[error("invalid variance components: {0}")]
    InvalidVariance(String),

    #[error("singular covariance: {0}")]
    SingularCovariance(String),

    #[error("rank-deficient {block} design (reciprocal condition estimate {rcond:.3e})")]
    RankDeficient { block: String, rcond: f64 },

    #[error("resource limit exceeded: {0}")]
    ResourceLimit(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error(
        "optimizer did not converge after {iterations} iterations \
         (best criterion {criterion:.10e}, gradient norm {gradient_norm:.3e})"
    )]
    NonConvergence {
        iterations: usize,
        criterion: f64,
        gradient_norm: f64,
        best: VarianceComponents,
    },

    #[error("configuration error at {path}: {message}")]
    Config { path: String, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn mismatch(what: impl Into<String>, expected: impl ToString, actual: impl ToString) -> Self {
        Error::DimensionMismatch {
            what: what.into(),
            expected: expected.to_string(),
            actual: actual.to_string(),
        }
    }
}
