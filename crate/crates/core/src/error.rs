use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("no internal clause delimiter in joke: {0:?}")]
    Segmentation(String),

    #[error("entity linker unavailable: {0}")]
    LinkerUnavailable(String),

    #[error("SPARQL endpoint unavailable: {0}")]
    EndpointUnavailable(String),

    #[error("malformed provider response: {0}")]
    MalformedResponse(String),

    #[error("tokenizer cannot cover label {0:?}")]
    UnknownToken(String),

    #[error("sequence of {len} tokens exceeds the maximum of {max}")]
    Length { len: usize, max: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("config mismatch between checkpoints: {0}")]
    ConfigMismatch(String),

    #[error("training diverged at step {step}: loss {loss}")]
    Divergence { step: u64, loss: f64 },

    #[error("line count mismatch: {hyps} hypotheses vs {refs} references")]
    LineCountMismatch { hyps: usize, refs: usize },

    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),

    // The cause is part of the message, so it is not exposed as a source.
    #[error("{path}: {error}")]
    Io { path: PathBuf, error: std::io::Error },

    #[error("{path}:{line}: {message}")]
    Parse { path: PathBuf, line: usize, message: String },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), error: source }
    }
}
