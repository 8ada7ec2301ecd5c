//! Workbench errors, split so the CLI can map them to exit codes.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, WorkbenchError>;

#[derive(Debug, Error)]
pub enum WorkbenchError {
    /// Bad configuration or arguments (CLI exit code 1).
    #[error("validation error: {0}")]
    Validation(String),

    /// Filesystem or serialization trouble (CLI exit code 2).
    #[error("io error: {0}")]
    Io(String),

    /// Errors bubbling up from the engine.
    #[error(transparent)]
    Core(#[from] corect_core::CoreError),
}

impl WorkbenchError {
    pub fn validation(msg: impl Into<String>) -> Self {
        Self::Validation(msg.into())
    }

    pub fn io(msg: impl Into<String>) -> Self {
        Self::Io(msg.into())
    }

    /// Exit code the CLI should report for this error.
    pub fn exit_code(&self) -> i32 {
        match self {
            WorkbenchError::Io(_) => 2,
            WorkbenchError::Core(corect_core::CoreError::Io(_)) => 2,
            _ => 1,
        }
    }
}

impl From<std::io::Error> for WorkbenchError {
    fn from(e: std::io::Error) -> Self {
        WorkbenchError::Io(e.to_string())
    }
}

impl From<serde_json::Error> for WorkbenchError {
    fn from(e: serde_json::Error) -> Self {
        WorkbenchError::Io(e.to_string())
    }
}

impl From<csv::Error> for WorkbenchError {
    fn from(e: csv::Error) -> Self {
        WorkbenchError::Io(e.to_string())
    }
}
