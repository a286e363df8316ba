use std::io;
use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },

    #[error("{file}:{line}: {message}")]
    Parse { file: String, line: usize, message: String },

    #[error("unknown utterance id `{0}`")]
    MissingId(String),

    #[error("unknown token {token} at position {position}")]
    UnknownToken { token: usize, position: usize },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },

    #[error("length mismatch: expected {expected}, got {got}")]
    Length { expected: usize, got: usize },

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("unknown symbol {0}")]
    UnknownSymbol(u32),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("non-finite values in {0}")]
    NonFinite(&'static str),

    #[error("CTC alignment infeasible: {frames} frames cannot emit a target needing {required}")]
    CtcInfeasible { frames: usize, required: usize },

    #[error("non-finite loss in task {task} at step {step}")]
    Divergence { task: String, step: u64 },

    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
