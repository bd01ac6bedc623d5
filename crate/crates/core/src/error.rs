use thiserror::Error;

/// Unified error type for the library surface.
#[derive(Debug, Error)]
pub enum Error {
    /// A precondition on an argument was violated.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// Input is structurally valid but degenerate (e.g. a zero vector
    /// where a direction is required).
    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    /// A computation produced a non-finite value.
    #[error("numerical failure: {0}")]
    NumericalFailure(String),

    /// A file could not be parsed. Line numbers are 1-based.
    #[error("format error at line {line}: {msg}")]
    FormatError { line: usize, msg: String },

    /// Parsed data violates a dataset invariant.
    #[error("validation error: {0}")]
    ValidationError(String),

    /// An operation was called in a state it cannot handle
    /// (missing cache, mismatched shapes between paired states).
    #[error("invalid state: {0}")]
    InvalidState(String),

    /// Randomized initialization failed after bounded attempts.
    #[error("initialization failure: {0}")]
    InitFailure(String),

    /// Configuration is inconsistent with the dataset or with itself.
    #[error("config error: {0}")]
    ConfigError(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn invalid_argument(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
