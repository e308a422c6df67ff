use std::path::PathBuf;

use ecpc_core::EcpcError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{}: row {row}, column {column}: {message}", path.display())]
    Data { path: PathBuf, row: usize, column: String, message: String },
    #[error("{}: {message}", path.display())]
    Format { path: PathBuf, message: String },
    #[error("{0}")]
    Config(String),
    #[error(transparent)]
    Core(#[from] EcpcError),
}

pub type Result<T> = std::result::Result<T, CliError>;

impl CliError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io { path: path.into(), source }
    }

    pub fn format(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        CliError::Format { path: path.into(), message: message.into() }
    }

    /// 1 for numeric failures, 2 for I/O, input and configuration problems.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Core(EcpcError::NonConvergence { .. } | EcpcError::Singular(_) | EcpcError::Numeric(_)) => 1,
            _ => 2,
        }
    }
}
