//! Error type shared across the crate.
//!
//! Two broad classes matter to callers: [`Error::Validation`]-like errors
//! (bad arguments, malformed inputs, contract violations — the caller can fix
//! the call) and runtime failures (I/O, non-finite numerics mid-computation).
//! The CLI maps the former to exit code 1 and the latter to exit code 2.

use thiserror::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Elementwise/matmul shape mismatch; carries both offending shapes.
    #[error("shape mismatch in `{op}`: left {lhs:?} vs right {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// Reduction or slicing along an axis the tensor does not have.
    #[error("invalid axis {axis} for tensor of rank {rank}")]
    InvalidAxis { axis: usize, rank: usize },

    /// `backward` called on a non-scalar root node.
    #[error("backward requires a scalar root, got shape {shape:?}")]
    NonScalarRoot { shape: Vec<usize> },

    /// Domain/contract violation with a human-readable description.
    #[error("validation error: {0}")]
    Validation(String),

    /// A numeric quantity that must be finite was NaN or infinite.
    #[error("non-finite value: {0}")]
    NonFinite(String),

    /// Versioned document with an unsupported schema tag.
    #[error("unsupported schema `{found}` (expected `{expected}`)")]
    Schema { expected: String, found: String },

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Shorthand for a [`Error::Validation`] built from `format!` pieces.
    pub fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }

    /// True for errors a caller can fix by changing arguments or inputs
    /// (the CLI's exit-code-1 class).
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Shape { .. }
                | Error::InvalidAxis { .. }
                | Error::NonScalarRoot { .. }
                | Error::Validation(_)
                | Error::Schema { .. }
        )
    }
}
