use mneme_core::Error as CoreError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] CoreError),
}

impl CliError {
    /// 2 usage or configuration, 3 data, 4 numeric failure, 1 otherwise.
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Core(e) if e.is_numeric() => 4,
            CliError::Core(CoreError::Config(_)) => 2,
            CliError::Core(
                CoreError::Input(_) | CoreError::Corpus(_) | CoreError::Io { .. } | CoreError::Json(_) | CoreError::Format(_),
            ) => 3,
            CliError::Core(_) => 1,
        }
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Core(CoreError::Json(e))
    }
}

pub type CliResult<T> = Result<T, CliError>;
