use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor or matrix dimensions do not line up.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// An invariant on a configuration value was violated.
    #[error("configuration error: {0}")]
    Config(String),

    /// The caller used an API incorrectly (e.g. backward on a non-scalar).
    #[error("usage error: {0}")]
    Usage(String),

    #[error("empty dataset: {0}")]
    EmptyDataset(String),

    #[error("metric undefined: {0}")]
    MetricUndefined(String),

    #[error("non-finite gradient in parameter `{0}`")]
    NonFiniteGradient(String),

    #[error("{path}: {message}")]
    Decode { path: PathBuf, message: String },

    #[error("checkpoint format error: {0}")]
    Checkpoint(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{0}")]
    Runtime(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// `true` for errors a user fixes by changing flags or config files.
    pub fn is_config(&self) -> bool {
        matches!(self, Error::Config(_))
    }
}

pub(crate) fn dim_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Dimension(msg.into()))
}
