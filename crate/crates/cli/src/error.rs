use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("usage: {0}")]
    Usage(String),

    #[error("configuration: {0}")]
    Config(String),

    /// Malformed data file; `line` is 1-based and counts the header.
    #[error("{path}:{line}: {message}")]
    Data { path: String, line: u64, message: String },

    /// The computation finished but did not meet its convergence or accuracy target.
    #[error("{0}")]
    NotConverged(String),

    #[error(transparent)]
    Core(#[from] matchwage_core::Error),

    #[error("{0}")]
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Usage(_) | Self::Config(_) | Self::Core(matchwage_core::Error::Config(_)) => 2,
            Self::NotConverged(_) => 3,
            _ => 1,
        }
    }
}
