use std::fmt;

use cife_core::CifeError;

/// Command failure with its exit-code category.
#[derive(Debug)]
pub enum CliError {
    /// Bad flags, bad config or a refused request. Exit code 2.
    Usage(String),
    /// A gate or run failed. Exit code 1.
    Failure(String),
}

impl CliError {
    pub fn usage(msg: impl Into<String>) -> Self {
        CliError::Usage(msg.into())
    }

    pub fn failure(msg: impl Into<String>) -> Self {
        CliError::Failure(msg.into())
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Failure(_) => 1,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "error: {m}"),
            CliError::Failure(m) => write!(f, "failed: {m}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<CifeError> for CliError {
    fn from(e: CifeError) -> Self {
        match e {
            CifeError::Diverged { .. } | CifeError::Tensor(_) | CifeError::Io { .. } | CifeError::Json(_) => {
                CliError::Failure(e.to_string())
            }
            other => CliError::Usage(other.to_string()),
        }
    }
}
