use std::path::Path;

use evolq_core::Error as CoreError;

/// Failure of a command, classified by exit code.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("i/o error: {0}")]
    Io(String),

    #[error("numeric failure: {0}")]
    Numeric(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Io(_) => 3,
            CliError::Numeric(_) => 4,
        }
    }

    pub fn config(msg: impl Into<String>) -> Self {
        CliError::Config(msg.into())
    }

    pub fn io(path: &Path, err: impl std::fmt::Display) -> Self {
        CliError::Io(format!("{}: {err}", path.display()))
    }
}

impl From<CoreError> for CliError {
    fn from(e: CoreError) -> Self {
        match e {
            CoreError::Io(_) | CoreError::Format { .. } => CliError::Io(e.to_string()),
            CoreError::NonFinite(_) | CoreError::ZeroNorm { .. } => {
                CliError::Numeric(e.to_string())
            }
            CoreError::Dimension(_)
            | CoreError::Parameter(_)
            | CoreError::Domain(_)
            | CoreError::EmptyCalibration => CliError::Config(e.to_string()),
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;
