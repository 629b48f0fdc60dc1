use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("index {index} out of range (limit {limit})")]
    Range { index: usize, limit: usize },

    #[error("invalid argument: {0}")]
    Argument(String),

    /// A binary or JSON file did not match its declared layout.
    #[error("format error in {field}: {message}")]
    Format {
        field: &'static str,
        message: String,
    },

    /// A dataset entry violated an invariant.
    #[error("validation error for example {example}: {message}")]
    Validation { example: String, message: String },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("instance too small: {patches} patches cannot host {subpatches} sub-patches")]
    InstanceTooSmall { patches: usize, subpatches: usize },

    #[error("degenerate vector: zero norm")]
    DegenerateVector,

    #[error("attempted to update parameters of a frozen projector")]
    FrozenParameters,

    #[error("invariant violated: {0}")]
    Invariant(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn format(field: &'static str, message: impl Into<String>) -> Self {
        Error::Format {
            field,
            message: message.into(),
        }
    }

    pub(crate) fn validation(example: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Validation {
            example: example.into(),
            message: message.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
