use std::io;

use thiserror::Error;

/// Errors raised anywhere in the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("zero-norm vector in {0}")]
    ZeroNorm(&'static str),

    #[error("matrix is not symmetric (max asymmetry {0:e})")]
    NotSymmetric(f64),

    #[error("sequence of {frames} frames is shorter than required {required}")]
    SequenceTooShort { frames: usize, required: usize },

    #[error("crop of {requested} frames exceeds utterance length {available}")]
    CropTooLong { requested: usize, available: usize },

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("unknown layer selection `{0}`")]
    UnknownSelection(String),

    #[error("config mismatch: {0}")]
    ConfigMismatch(String),

    #[error("corrupt file: {0}")]
    CorruptFile(String),

    #[error("regularizer reference: {0}")]
    Reference(String),

    #[error("rank deficient: {0}")]
    RankDeficient(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
