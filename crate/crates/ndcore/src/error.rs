//! Error type shared by all engine operations.

use std::fmt;

/// Errors raised by array construction and tape operations.
#[derive(Debug, Clone, PartialEq)]
pub enum NdError {
    /// Operand shapes are incompatible for the named operation.
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    /// Reduction axis outside the operand's rank.
    BadAxis { axis: usize, rank: usize },
    /// Non-finite input, log of a nonpositive value, or similar.
    Numeric(String),
    /// Structurally invalid request (empty segment, bad index map, ...).
    Invalid(String),
}

impl fmt::Display for NdError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            NdError::ShapeMismatch { op, lhs, rhs } => {
                write!(f, "{op}: shape mismatch between {lhs:?} and {rhs:?}")
            }
            NdError::BadAxis { axis, rank } => {
                write!(f, "axis {axis} out of range for rank {rank}")
            }
            NdError::Numeric(msg) => write!(f, "numeric error: {msg}"),
            NdError::Invalid(msg) => write!(f, "invalid operation: {msg}"),
        }
    }
}

impl std::error::Error for NdError {}

pub type Result<T> = std::result::Result<T, NdError>;
