use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumError {
    #[error("{op}: dimension mismatch between {lhs:?} and {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: expected {expected}, got shape {shape:?}")]
    Rank {
        op: &'static str,
        expected: &'static str,
        shape: Vec<usize>,
    },

    #[error("shape {shape:?} holds {expected} values but {got} were supplied")]
    Length {
        shape: Vec<usize>,
        expected: usize,
        got: usize,
    },

    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },

    #[error("softmax row {row} is fully masked")]
    DegenerateMask { row: usize },

    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },

    #[error("matrix is singular (pivot {pivot} vanished)")]
    Singular { pivot: usize },

    #[error("{0}")]
    Contract(String),
}

pub type Result<T> = std::result::Result<T, NumError>;
