use thiserror::Error;
use trax_core::TrackError;

/// A failure with the process exit code it maps to.
#[derive(Debug, Error)]
pub enum CliError {
    /// Bad arguments, configs or input files (exit 2).
    #[error("{0}")]
    Usage(String),
    /// Numerical failure such as a diverged loss (exit 3).
    #[error("{0}")]
    Numeric(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl CliError {
    pub fn usage(msg: impl Into<String>) -> Self {
        CliError::Usage(msg.into())
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Numeric(_) => 3,
            CliError::Usage(_) | CliError::Io(_) => 2,
        }
    }
}

impl From<TrackError> for CliError {
    fn from(e: TrackError) -> Self {
        match e {
            TrackError::Diverged { .. } => CliError::Numeric(e.to_string()),
            TrackError::Io(io) => CliError::Io(io),
            other => CliError::Usage(other.to_string()),
        }
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        CliError::Usage(format!("csv: {e}"))
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Usage(format!("json: {e}"))
    }
}
