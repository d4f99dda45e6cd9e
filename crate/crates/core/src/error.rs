use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, NblError>;

#[derive(Debug, Error)]
pub enum NblError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("bad magic bytes {0:?}")]
    BadMagic([u8; 4]),

    #[error("unsupported format version {0}")]
    UnsupportedVersion(u16),

    #[error("unsupported dtype code {0}")]
    UnsupportedDtype(u8),

    #[error("invalid header: {0}")]
    InvalidHeader(String),

    #[error("truncated input: expected {expected} bytes, got {actual}")]
    Truncated { expected: u64, actual: u64 },

    #[error("non-finite value at element {0}")]
    NonFinite(usize),

    #[error("need at least 2 samples, have {0}")]
    InsufficientSamples(u64),

    #[error("degenerate covariance: {0}")]
    Degenerate(String),

    #[error("output has zero variance")]
    ZeroOutputVariance,

    #[error("every token was skipped (zero-norm vectors)")]
    AllTokensSkipped,

    #[error("{0} did not converge")]
    ConvergenceFailure(&'static str),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("missing input: {0}")]
    MissingInput(String),

    #[error("cosine criterion needs raw activations, only moments are available for layer {0}")]
    CosineUnavailable(usize),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl NblError {
    /// Errors caused by bad user input rather than a failure while running.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            NblError::InvalidConfig(_)
                | NblError::InvalidArgument(_)
                | NblError::DimensionMismatch(_)
        )
    }
}
