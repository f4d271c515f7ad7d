use std::io;

/// Errors raised anywhere in the crate.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Shapes or extents that do not fit together.
    #[error("dimension error: {0}")]
    Dimension(String),
    /// A NaN or infinity appeared in an operation output.
    #[error("numeric error in {op}: non-finite value produced")]
    Numeric { op: String },
    /// A caller broke an API contract (non-scalar loss, missing gradient, ...).
    #[error("contract error: {0}")]
    Contract(String),
    /// An argument outside its valid domain.
    #[error("value error: {0}")]
    Value(String),
    /// Invalid configuration; `key` names the offending entry.
    #[error("config error at `{key}`: {msg}")]
    Config { key: String, msg: String },
    /// Malformed checkpoint / feature file.
    #[error("format error: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn config(key: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            msg: msg.into(),
        }
    }

    pub(crate) fn numeric(op: &str) -> Self {
        Error::Numeric { op: op.to_string() }
    }
}
