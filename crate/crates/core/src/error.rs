use thiserror::Error;

use crate::distortion::DistortionKind;

/// Errors raised by the estimators and their building blocks.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("dataset is empty")]
    EmptyDataset,

    #[error("non-finite value at row {row}, column {col}")]
    NonFinite { row: usize, col: usize },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("shape mismatch: expected {expected_rows}x{expected_cols}, got {rows}x{cols}")]
    ShapeMismatch {
        expected_rows: usize,
        expected_cols: usize,
        rows: usize,
        cols: usize,
    },

    #[error("invalid weights: {0}")]
    InvalidWeights(String),

    #[error("batch size must be at least 1")]
    InvalidBatch,

    #[error("distortion overflow at ({row}, {col})")]
    DistortionOverflow { row: usize, col: usize },

    #[error("distortion {0:?} is not differentiable")]
    NotDifferentiable(DistortionKind),

    #[error("degenerate support: every atom seen by row {row} has zero weight")]
    DegenerateSupport { row: usize },

    #[error("numeric failure at index {index}: {what}")]
    Numeric { index: usize, what: &'static str },

    #[error("invariant violated: {0}")]
    InvariantViolation(String),

    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("Sinkhorn did not converge after {iterations} iterations (marginal violation {violation:e})")]
    NotConverged { iterations: usize, violation: f64 },

    #[error("potentials are stale or were not converged for this problem")]
    StalePotentials,

    #[error("lambda = {lambda} lies below the analytic segment (lambda * sigma2 = {product} < 1)")]
    OutOfSegment { lambda: f64, product: f64 },

    #[error("unsupported: {0}")]
    Unsupported(&'static str),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn require_positive(name: &'static str, value: f64) -> Result<()> {
    if value.is_finite() && value > 0.0 {
        Ok(())
    } else {
        Err(Error::InvalidParameter {
            name,
            reason: format!("must be positive and finite, got {value}"),
        })
    }
}
