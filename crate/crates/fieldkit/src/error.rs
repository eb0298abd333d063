//! Error type shared across the crate.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("mask is empty or inconsistent: {0}")]
    InvalidMask(String),

    #[error("signal basis is rank deficient (gamma'gamma not invertible)")]
    DegenerateBasis,

    #[error("matrix is singular or has an all-zero row: {0}")]
    Singular(String),

    #[error("incomplete Cholesky broke down (nonpositive pivot after diagonal shifts)")]
    FactorizationBreakdown,

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("manifest error: {0}")]
    Manifest(String),
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Manifest(e.to_string())
    }
}
