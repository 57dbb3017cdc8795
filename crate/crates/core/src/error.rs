use thiserror::Error;

/// Errors raised by the weighting, estimation, resampling and evaluation routines.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("empty input: {0}")]
    Empty(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("training diverged at epoch {epoch} (loss is not finite); lower the learning rate")]
    Divergent { epoch: usize },

    #[error("support violation at index {index}: p > 0 where the proposal density is 0")]
    SupportViolation { index: usize },

    #[error("all importance weights are zero; cannot normalize or resample")]
    ZeroWeights,

    #[error("importance weight must be strictly positive, got {0}")]
    NonPositiveWeight(f64),

    #[error("zero variance in samples")]
    ZeroVariance,

    #[error("sampler failure: {0}")]
    Sampler(String),

    #[error("regression is rank deficient: {0}")]
    RankDeficient(String),

    #[error("{0}")]
    Unsupported(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

/// Coarse classification used by the command line driver to pick an exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Validation,
    Io,
    Numeric,
}

impl Error {
    pub fn class(&self) -> ErrorClass {
        match self {
            Error::DimensionMismatch { .. }
            | Error::Empty(_)
            | Error::InvalidConfig(_)
            | Error::Unsupported(_)
            | Error::Json(_)
            | Error::Csv(_) => ErrorClass::Validation,
            Error::Io(_) => ErrorClass::Io,
            _ => ErrorClass::Numeric,
        }
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::InvalidConfig(msg.into())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
