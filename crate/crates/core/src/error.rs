//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("matrix not positive definite: pivot {pivot} is non-positive")]
    NotPositiveDefinite { pivot: usize },

    #[error("zero diagonal entry at index {index} in triangular solve")]
    ZeroDiagonal { index: usize },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("log of non-positive value")]
    LogNonPositive,

    #[error("backward requires a scalar loss node, got shape {shape:?}")]
    NotScalarLoss { shape: Vec<usize> },

    #[error("csv: {0}")]
    Csv(String),

    #[error("dataset: {0}")]
    Dataset(String),

    #[error("config: {0}")]
    Config(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
