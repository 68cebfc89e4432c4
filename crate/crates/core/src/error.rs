use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the restoration stack.
#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error on {path}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("format error: {0}")]
    Format(String),
    #[error("length error: {0}")]
    Length(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("parameter error: {0}")]
    Parameter(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("index error: {0}")]
    Index(String),
    #[error("serialization error: {0}")]
    Serialization(String),
    #[error("no frames found in {0}")]
    NoFrames(PathBuf),
    #[error("nothing to merge: token chunk holds {0} frame(s)")]
    NothingToMerge(usize),
    #[error("sequence too short: {0}")]
    TooShort(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
