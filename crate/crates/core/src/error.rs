use std::path::PathBuf;

/// Errors surfaced by the engine, grouped by the kind of failure so that a
/// front end can map them to exit codes.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Invalid hyperparameters, widths or file/config mismatches.
    #[error("configuration error: {0}")]
    Config(String),

    /// A caller broke an operation's precondition (shape mismatch, empty input).
    #[error("contract violation: {0}")]
    Contract(String),

    /// Malformed or missing dataset content.
    #[error("data error: {0}")]
    Data(String),

    /// Checkpoint container could not be decoded.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    /// Non-finite loss or activations during training.
    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

macro_rules! contract {
    ($cond:expr, $($arg:tt)+) => {
        if !$cond {
            return Err($crate::error::Error::Contract(format!($($arg)+)));
        }
    };
}
pub(crate) use contract;
