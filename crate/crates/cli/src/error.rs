use std::fmt;
use std::path::Path;

use emr_core::Error;

/// Failure classes, each with its own process exit code.
#[derive(Debug)]
pub enum CliError {
    /// Bad flags, config or missing input path.
    Usage(String),
    /// Unreadable or malformed data.
    Data(String),
    /// Non-finite losses and other pipeline failures.
    Training(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Data(_) => 3,
            CliError::Training(_) => 4,
        }
    }

    pub fn missing(path: &Path) -> Self {
        CliError::Usage(format!("path not found: {}", path.display()))
    }

    pub fn io(path: &Path, e: std::io::Error) -> Self {
        CliError::Data(format!("{}: {e}", path.display()))
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Data(m) => write!(f, "data error: {m}"),
            CliError::Training(m) => write!(f, "training failure: {m}"),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let msg = e.to_string();
        match e {
            Error::InvalidArgument(_) | Error::InvalidInput(_) | Error::Json(_) => CliError::Usage(msg),
            Error::Ingest { .. } | Error::Format(_) | Error::Io { .. } | Error::ShapeMismatch { .. } => CliError::Data(msg),
            Error::TrainingFailure { .. } => CliError::Training(msg),
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;
