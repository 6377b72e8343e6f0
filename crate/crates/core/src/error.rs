use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, DidError>;

#[derive(Debug, Error)]
pub enum DidError {
    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("invalid tensor: {0}")]
    InvalidTensor(String),

    #[error("image {height}x{width} is not divisible into {patch}x{patch} patches")]
    PatchSize {
        height: usize,
        width: usize,
        patch: usize,
    },

    #[error("token count {0} is not a perfect square")]
    NonSquareTokens(usize),

    #[error("column {column} has non-positive sum {sum}")]
    ColumnSum { column: usize, sum: f64 },

    #[error("mask has no foreground pixel")]
    EmptyMask,

    #[error("bounding box {bbox:?} is invalid for a {width}x{height} image")]
    InvalidBox {
        bbox: [usize; 4],
        width: usize,
        height: usize,
    },

    #[error("average precision is undefined without positive labels")]
    NoPositives,

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl DidError {
    pub(crate) fn shape(op: &'static str, left: &[usize], right: &[usize]) -> Self {
        DidError::ShapeMismatch {
            op,
            left: left.to_vec(),
            right: right.to_vec(),
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        DidError::Format {
            path: path.into(),
            message: message.into(),
        }
    }
}
