use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration; the message names the offending field.
    #[error("configuration error: {0}")]
    Config(String),
    /// Tensor shapes or lengths violate an operation's contract.
    #[error("shape error: {0}")]
    Shape(String),
    /// Index or window outside the valid range.
    #[error("range error: {0}")]
    Range(String),
    /// A precondition on values (for example finiteness) was violated.
    #[error("contract violation: {0}")]
    Contract(String),
    /// Training diverged.
    #[error("training diverged: {0}")]
    Divergence(String),
    #[error("format error: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn config_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Config(msg.into()))
}
