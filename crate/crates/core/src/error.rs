use thiserror::Error;

/// Errors raised by the numerical kernels, compressors and simulator.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("{op}: shape mismatch ({left:?} vs {right:?})")]
    ShapeMismatch {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },

    #[error("{0}: non-finite value")]
    NonFinite(&'static str),

    #[error("cosine similarity undefined for a zero-norm input")]
    UndefinedSimilarity,

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("malformed payload: {0}")]
    Decode(String),
}

pub type Result<T> = std::result::Result<T, Error>;
