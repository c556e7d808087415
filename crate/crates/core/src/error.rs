use std::io;

/// Errors produced by the quantization toolkit.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("cannot normalize a zero-norm prediction vector (row {row})")]
    ZeroNorm { row: usize },

    #[error("calibration set is empty")]
    EmptyCalibration,

    #[error("malformed file at byte offset {offset}: {msg}")]
    Format { offset: u64, msg: String },

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    pub(crate) fn param(msg: impl Into<String>) -> Self {
        Error::Parameter(msg.into())
    }

    pub(crate) fn format(offset: u64, msg: impl Into<String>) -> Self {
        Error::Format {
            offset,
            msg: msg.into(),
        }
    }
}
