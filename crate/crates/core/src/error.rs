use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("matrix is not positive definite")]
    NotPositiveDefinite,
    #[error("covariance is not symmetric (max relative deviation {0:e})")]
    AsymmetricInput(f64),
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("invalid mask size {size} for dimension {dim}")]
    InvalidMaskSize { dim: usize, size: usize },
    #[error("enumeration of {count} masks exceeds the cap of {cap}")]
    EnumerationTooLarge { count: String, cap: u64 },
    #[error("curve has no points")]
    EmptyCurve,
    #[error("non-finite loss at epoch {epoch}")]
    NonFiniteLoss { epoch: usize },
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("malformed file at line {line}: {message}")]
    Malformed { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
