use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, found {found}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("matrix is not positive definite (pivot {pivot} = {value:e})")]
    NotPositiveDefinite { pivot: usize, value: f64 },

    #[error("matrix is ill-conditioned (condition estimate {estimate:e} exceeds {limit:e})")]
    IllConditioned { estimate: f64, limit: f64 },

    #[error("conjugate-gradient breakdown at iteration {iteration}: r'Ad = {curvature:e} <= 0")]
    Breakdown { iteration: usize, curvature: f64 },

    #[error("ML search space of {candidates} candidates exceeds the limit of {limit}")]
    SearchSpaceTooLarge { candidates: u128, limit: u128 },

    #[error("empty batch")]
    EmptyBatch,

    #[error("label {index} has zero norm")]
    ZeroNormLabel { index: usize },

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("training diverged: {0}")]
    Divergence(String),

    #[error("unknown detector `{0}`")]
    UnknownDetector(String),

    #[error("forward trace does not match parameters: {0}")]
    TraceMismatch(String),

    #[error("unsupported format version {found} (expected {expected})")]
    Version { found: u64, expected: u64 },

    #[error("malformed file {path}: field `{field}`: {message}")]
    Parse {
        path: PathBuf,
        field: String,
        message: String,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn dims(context: &'static str, expected: usize, found: usize) -> Self {
        Error::DimensionMismatch {
            context,
            expected,
            found,
        }
    }
}
