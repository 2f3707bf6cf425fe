use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("degenerate prototype: row {row} has norm {norm:e}")]
    DegeneratePrototype { row: usize, norm: f64 },

    #[error("degenerate class: episode class {class} has no support occurrences")]
    DegenerateClass { class: usize },

    #[error("coefficient of variation undefined: mean is {mean}")]
    UndefinedCv { mean: f64 },

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("empty dataset")]
    EmptyDataset,

    #[error("insufficient overlap: {found} words shared, need at least {required}")]
    InsufficientOverlap { found: usize, required: usize },

    #[error("sampling infeasible: class {class:?} {reason}")]
    SamplingInfeasible { class: String, reason: String },

    #[error("sampling failed after {retries} retries (episode {episode_index})")]
    RetryExhausted { retries: usize, episode_index: u64 },

    #[error("format error: {0}")]
    Format(String),

    #[error("consistency error: {0}")]
    Consistency(String),

    #[error("non-finite rows in embedding data: {rows:?}")]
    NonFiniteRows { rows: Vec<usize> },

    #[error("coverage error: sentence {sent} position {pos} ({word:?}) not in embedding store")]
    Coverage { sent: u64, pos: u32, word: String },

    #[error("numerical failure in {term}")]
    NumericalFailure { term: String },

    #[error("training diverged at step {step}: loss {loss}")]
    Divergence { step: usize, loss: f64 },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// True for errors that originate in reading or writing files, or in
    /// malformed file content.
    pub fn is_io_or_format(&self) -> bool {
        matches!(
            self,
            Error::Io { .. }
                | Error::Format(_)
                | Error::Consistency(_)
                | Error::NonFiniteRows { .. }
                | Error::Parse { .. }
                | Error::Json(_)
        )
    }
}
