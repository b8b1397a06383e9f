use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("unknown op kind `{0}`")]
    UnknownOp(String),

    #[error("backward root must be a 1x1 scalar, got {rows}x{cols}")]
    NonScalarRoot { rows: usize, cols: usize },

    #[error("value belongs to tape {found}, not tape {expected}")]
    ForeignValue { expected: u64, found: u64 },

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },

    #[error("no text records")]
    NoTexts,

    #[error("no video records")]
    NoVideos,

    #[error("text `{text_id}` references missing video `{video_id}`")]
    DanglingVideo { text_id: String, video_id: String },

    #[error("record `{id}`: {reason}")]
    InvalidRecord { id: String, reason: String },

    #[error("invalid config field `{field}`: {reason}")]
    Config { field: String, reason: String },

    #[error("vocabulary partition overlap: token {token} is in both `{first}` and `{second}`")]
    VocabOverlap {
        token: u32,
        first: &'static str,
        second: &'static str,
    },

    #[error("token sequence is empty")]
    EmptyTokens,

    #[error("sequence of length {len} exceeds capacity {max}")]
    TooLong { len: usize, max: usize },

    #[error("{0}: empty token span")]
    EmptySpan(String),

    #[error("no entities above threshold")]
    NoEntities,

    #[error("missing positive for {axis} {index}")]
    MissingPositive { axis: &'static str, index: usize },

    #[error("similarity matrix must be square, got {rows}x{cols}")]
    NotSquare { rows: usize, cols: usize },

    #[error("row {row} is not unit-norm (norm {norm})")]
    NotUnitNorm { row: usize, norm: f64 },

    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: u64 },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
