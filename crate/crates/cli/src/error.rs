use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),

    #[error("check failed: {0}")]
    Check(String),

    #[error(transparent)]
    Core(#[from] attnlab_core::Error),

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),
}

impl CliError {
    /// 1 for failed checks and runtime failures, 2 for bad input.
    pub fn exit_code(&self) -> u8 {
        use attnlab_core::Error as E;
        match self {
            CliError::Usage(_) => 2,
            CliError::Core(
                E::UnsupportedDegree(_)
                | E::Shape(_)
                | E::InvalidArgument(_)
                | E::OutOfRange(_)
                | E::InstanceTooLarge { .. }
                | E::UnknownProfile { .. }
                | E::Toml(_),
            ) => 2,
            _ => 1,
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;
