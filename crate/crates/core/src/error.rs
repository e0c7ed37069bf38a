use thiserror::Error;

/// Errors raised by the numeric, density and training routines.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch: expected {expected}, got {actual}")]
    ShapeMismatch { expected: String, actual: String },

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("vector norm {norm:e} is below the normalization threshold")]
    DegenerateNorm { norm: f64 },

    #[error("row {row} is not unit-norm (|x| = {norm}) but the vMF kernel requires unit features")]
    NotUnitNorm { row: usize, norm: f64 },

    #[error("leave-one-out exclusion leaves no anchors")]
    ExclusionEmptiesSet,

    #[error("tape does not match the current parameters (recorded version {tape}, model version {model})")]
    StaleTape { tape: u64, model: u64 },

    #[error("non-finite value in {stage} at iteration {iteration}")]
    NonFinite { stage: String, iteration: usize },

    #[error("malformed input: {0}")]
    Parse(String),

    #[error("io error: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(err: std::io::Error) -> Self {
        Error::Io(err.to_string())
    }
}

impl From<csv::Error> for Error {
    fn from(err: csv::Error) -> Self {
        Error::Parse(err.to_string())
    }
}

impl From<serde_json::Error> for Error {
    fn from(err: serde_json::Error) -> Self {
        Error::Parse(err.to_string())
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn shape_err(expected: impl Into<String>, actual: impl Into<String>) -> Error {
    Error::ShapeMismatch {
        expected: expected.into(),
        actual: actual.into(),
    }
}
