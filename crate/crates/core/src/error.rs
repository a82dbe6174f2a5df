use thiserror::Error;

/// Errors raised by the engine and the search machinery.
#[derive(Debug, Error)]
pub enum Error {
    /// The caller handed in data that violates an operation's input contract
    /// (shape mismatch, wrong vector length, unknown candidate, ...).
    #[error("rejected input: {0}")]
    Input(String),
    /// A configuration that can never produce a valid result (non-positive
    /// output size, non-integer channel count, bad schedule bounds, ...).
    #[error("rejected configuration: {0}")]
    Config(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn input<S: Into<String>>(msg: S) -> Error {
    Error::Input(msg.into())
}

pub(crate) fn config<S: Into<String>>(msg: S) -> Error {
    Error::Config(msg.into())
}
