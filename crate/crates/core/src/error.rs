use std::path::PathBuf;

use thiserror::Error;

use crate::checkpoint::CheckpointError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: invalid UTF-8 at byte offset {offset}")]
    Utf8 { path: PathBuf, offset: usize },
    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("tokenizer: {0}")]
    Tokenizer(String),
    #[error("noising: {0}")]
    Noise(String),
    #[error("model: {0}")]
    Model(String),
    #[error("training: {0}")]
    Train(String),
    #[error("non-finite loss for batch item {index}")]
    NonFiniteLoss { index: usize },
    #[error("non-finite gradient in tensor {0}")]
    NonFiniteGradient(String),
    #[error("decoding: {0}")]
    Decode(String),
    #[error("task: {0}")]
    Task(String),
    #[error("metric: {0}")]
    Metric(String),
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
