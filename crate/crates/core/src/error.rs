use std::path::PathBuf;

use crate::mdp::TokenId;

/// Errors raised by the core engine.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("token {token} is outside the vocabulary (size {vocab})")]
    InvalidAction { token: TokenId, vocab: usize },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("cannot score an empty generation")]
    EmptyGeneration,
    #[error("no prompt scores at or below the threshold {0}")]
    EmptyTail(f64),
    #[error("{}: line {line}: {msg}", path.display())]
    Parse { path: PathBuf, line: u64, msg: String },
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
