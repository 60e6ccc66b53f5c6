use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = NasError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum NasError {
    #[error("invalid search space: {0}")]
    InvalidSpace(String),

    #[error("invalid genome: {0}")]
    InvalidGenome(String),

    #[error("invalid encoding at position {position}: index {index} out of range 0..{len}")]
    InvalidEncoding {
        position: usize,
        index: usize,
        len: usize,
    },

    #[error("genome parse error at byte {position}: {message}")]
    GenomeParse { position: usize, message: String },

    #[error("integer overflow while computing {0}")]
    Overflow(&'static str),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("training diverged at step {step}: loss {loss} exceeded 10x initial loss {initial} for 100 consecutive steps")]
    Divergence { step: usize, loss: f64, initial: f64 },

    #[error("empty subset: {0}")]
    EmptySubset(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("measurement error: {0}")]
    Measurement(String),

    #[error("evaluation failed in generation {generation}: {source}")]
    Evaluation {
        generation: usize,
        #[source]
        source: Box<NasError>,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("checkpoint format error: {0}")]
    Format(String),

    #[error("unsupported checkpoint version {found} (expected {expected})")]
    UnsupportedVersion { found: u32, expected: u32 },

    #[error("history line {line}: {message}")]
    HistoryLine { line: usize, message: String },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl NasError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        NasError::Io {
            path: path.into(),
            source,
        }
    }
}
