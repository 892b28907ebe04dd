use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid shape: {0}")]
    InvalidShape(String),

    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid axis {axis} for rank-{rank} tensor")]
    InvalidAxis { axis: usize, rank: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("missing dataset file {}", .0.display())]
    MissingFile(PathBuf),

    #[error("dataset file {} has {actual} bytes, expected {expected}", path.display())]
    FileSize {
        path: PathBuf,
        expected: u64,
        actual: u64,
    },

    #[error("{}: record {record} has label byte {label} (> 9)", path.display())]
    BadLabel {
        path: PathBuf,
        record: usize,
        label: u8,
    },

    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),

    #[error("epoch {epoch}: {source}")]
    Epoch {
        epoch: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("parallel iteration {index} failed: {message}")]
    Iteration { index: usize, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
