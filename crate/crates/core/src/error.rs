use thiserror::Error;

/// Errors produced by tensor ops, model code, data ingestion, and I/O.
#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: expected {expected}, got shape {got:?}")]
    InvalidShape {
        op: &'static str,
        expected: &'static str,
        got: Vec<usize>,
    },

    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },

    #[error("backward: root must be a scalar of shape [1], got {got:?}")]
    NonScalarBackward { got: Vec<usize> },

    #[error("backward: tensor is detached (no graph node)")]
    DetachedBackward,

    #[error("attention: score graph does not reach the feature map")]
    DisconnectedGraph,

    #[error("{op}: {msg}")]
    InvalidArgument { op: &'static str, msg: String },

    #[error("format error: {0}")]
    Format(String),

    #[error("dataset error: {0}")]
    Data(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("training aborted: {0}")]
    Training(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
