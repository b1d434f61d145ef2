use thiserror::Error;

/// Errors produced by the lab's algorithms and simulators.
#[derive(Debug, Error)]
pub enum Error {
    #[error("unsupported polynomial degree {0} (expected 3, 4 or 5)")]
    UnsupportedDegree(usize),

    #[error("minimax fit did not converge after {iterations} exchange iterations")]
    FitFailed { iterations: usize },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("coordinate out of range: {0}")]
    OutOfRange(String),

    #[error("dependency cycle with zero iteration lag through task {0}")]
    ZeroLagCycle(String),

    #[error("instance too large for exhaustive search: {tiles} tiles on {processors} processors")]
    InstanceTooLarge { tiles: usize, processors: usize },

    #[error("lock simulation deadlocked with {pending} CTAs unfinished")]
    Deadlock { pending: usize },

    #[error("unknown hardware profile `{name}` (known: {known})")]
    UnknownProfile { name: String, known: String },

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),

    #[error("TOML error: {0}")]
    Toml(#[from] toml::de::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
