use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("invalid state: {0}")]
    State(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("incomplete grid: cell ({row}, {col}) has no feature vector")]
    IncompleteGrid { row: usize, col: usize },

    #[error("duplicate cell ({row}, {col})")]
    DuplicateCell { row: usize, col: usize },

    #[error("cell ({row}, {col}) lies outside a {rows}x{cols} grid")]
    CellOutOfRange {
        row: usize,
        col: usize,
        rows: usize,
        cols: usize,
    },

    #[error("format error at byte {offset}: {message}")]
    Format { offset: u64, message: String },

    #[error("parse error on line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("degenerate shift: magnitude {magnitude} is not smaller than dimension {dim}")]
    DegenerateShift { magnitude: usize, dim: usize },

    #[error("no tissue: no pixel has mean channel value below {threshold}")]
    NoTissue { threshold: u8 },

    #[error("image {height}x{width} is smaller than patch size {patch}")]
    TooSmall {
        height: usize,
        width: usize,
        patch: usize,
    },

    #[error("undefined statistic: {0}")]
    Undefined(String),

    #[error("degenerate test: {0}")]
    DegenerateTest(String),

    #[error("empty input: {0}")]
    Empty(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn dims(msg: impl Into<String>) -> Self {
        Error::DimensionMismatch(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::InvalidConfig(msg.into())
    }

    /// True for failures caused by the caller's input or configuration rather
    /// than by the environment.
    pub fn is_usage(&self) -> bool {
        !matches!(self, Error::Io { .. } | Error::State(_))
    }
}
