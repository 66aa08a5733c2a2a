use thiserror::Error;

/// Errors produced by the library.
#[derive(Debug, Error)]
pub enum Error {
    /// A configuration or shape contract was violated.
    #[error("configuration error: {0}")]
    Config(String),

    /// Input data does not match the model or schema.
    #[error("input error: {0}")]
    Input(String),

    /// An API was called incorrectly (e.g. backward on a non-scalar).
    #[error("usage error: {0}")]
    Usage(String),

    /// A metric is not defined for the given inputs.
    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    /// A non-finite value appeared where finite values are required.
    #[error("non-finite value: {0}")]
    NonFinite(String),

    /// A file could not be parsed.
    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Joins a list of violated constraints into a single configuration error.
    pub fn violations(list: Vec<String>) -> Self {
        Error::Config(list.join("; "))
    }
}

pub type Result<T> = std::result::Result<T, Error>;
