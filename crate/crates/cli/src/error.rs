use countycast_core::error::{EvalError, FeatureError, ForecastError, IngestError};
use thiserror::Error;

/// Every failure maps to one of two process exit statuses.
#[derive(Debug, Error)]
pub enum CliError {
    /// Bad flags or configuration values.
    #[error("{0}")]
    Usage(String),
    /// Missing or unusable input data.
    #[error("{0}")]
    Input(String),
    #[error("internal error: {0}")]
    Internal(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::Input(_) => 2,
            CliError::Internal(_) => 1,
        }
    }

    pub(crate) fn io(path: &std::path::Path, e: std::io::Error) -> Self {
        CliError::Internal(format!("{}: {e}", path.display()))
    }
}

impl From<ForecastError> for CliError {
    fn from(e: ForecastError) -> Self {
        match e {
            ForecastError::Config(_) => CliError::Usage(e.to_string()),
            ForecastError::NoInstances
            | ForecastError::MissingCurrent { .. }
            | ForecastError::Feature(_)
            | ForecastError::Eval(_) => CliError::Input(e.to_string()),
            ForecastError::Nn(_)
            | ForecastError::Diverged { .. }
            | ForecastError::Snapshot(_)
            | ForecastError::Io { .. } => CliError::Internal(e.to_string()),
        }
    }
}

impl From<IngestError> for CliError {
    fn from(e: IngestError) -> Self {
        CliError::Input(e.to_string())
    }
}

impl From<FeatureError> for CliError {
    fn from(e: FeatureError) -> Self {
        CliError::Input(e.to_string())
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        CliError::Input(e.to_string())
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        CliError::Internal(e.to_string())
    }
}
