use std::path::PathBuf;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error in {}: {message}", path.display())]
    Config { path: PathBuf, message: String },

    #[error("invalid argument: {0}")]
    Usage(String),

    #[error("{} run(s) diverged: {}", .0.len(), .0.join("; "))]
    Diverged(Vec<String>),

    #[error("bound verification failed: {}", .0.join("; "))]
    Verification(Vec<String>),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },

    #[error(transparent)]
    Core(#[from] hiermo::Error),
}

impl CliError {
    pub fn config(path: impl Into<PathBuf>, message: impl ToString) -> Self {
        CliError::Config {
            path: path.into(),
            message: message.to_string(),
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Diverged(_) | CliError::Core(hiermo::Error::NonFinite { .. }) => 2,
            CliError::Verification(_) => 3,
            _ => 1,
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;
