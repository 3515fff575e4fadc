use std::path::PathBuf;
use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// A caller broke an operation's precondition (shapes, extents, ranges).
    #[error("contract violation in {op}: {msg}")]
    Contract { op: &'static str, msg: String },

    /// Malformed or unexpected on-disk data.
    #[error("format error at byte {offset}: {msg}")]
    Format { offset: u64, msg: String },

    /// A named entry in a checkpoint does not fit the model it is loaded into.
    #[error("checkpoint entry `{name}`: {msg}")]
    EntryMismatch { name: String, msg: String },

    #[error("I/O error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// A metric that has no value for the given input (e.g. empty label support).
    #[error("undefined metric {metric}: {msg}")]
    UndefinedMetric { metric: &'static str, msg: String },

    /// Non-finite values appeared during optimization.
    #[error("numerical abort: {0}")]
    Numerical(String),
}

impl Error {
    pub fn contract(op: &'static str, msg: impl Into<String>) -> Self {
        Error::Contract { op, msg: msg.into() }
    }

    pub fn format(offset: u64, msg: impl Into<String>) -> Self {
        Error::Format { offset, msg: msg.into() }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
