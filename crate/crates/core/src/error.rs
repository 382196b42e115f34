use thiserror::Error;

/// Errors raised by the hierarchical-matrix routines.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum HmError {
    /// A request exceeds a fixed size guard (mesh level, dense materialization).
    #[error("capacity exceeded: {what} is {requested}, limit is {limit}")]
    Capacity {
        what: &'static str,
        requested: usize,
        limit: usize,
    },
    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        actual: usize,
    },
    #[error("empty input: {0}")]
    Empty(&'static str),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    /// Two H-matrices were combined although they live on different block-cluster trees.
    #[error("block-cluster trees differ")]
    TreeMismatch,
    #[error("block {block} is not a child of block {parent}")]
    NotAChild { parent: usize, block: usize },
    #[error("malformed serialized data: {0}")]
    Format(String),
    #[error("i/o error: {0}")]
    Io(String),
}

impl From<std::io::Error> for HmError {
    fn from(e: std::io::Error) -> Self {
        HmError::Io(e.to_string())
    }
}

pub type Result<T, E = HmError> = std::result::Result<T, E>;
