use thiserror::Error;

/// Errors raised by the linear algebra, update, optimization and reporting layers.
#[derive(Debug, Error)]
pub enum GainError {
    #[error("matrix is not positive definite: pivot {index} is {pivot:e}")]
    NotPositiveDefinite { index: usize, pivot: f64 },

    #[error("matrix is not symmetric: |a[{row},{col}] - a[{col},{row}]| = {gap:e}")]
    NotSymmetric { row: usize, col: usize, gap: f64 },

    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    DimensionMismatch {
        context: &'static str,
        expected: String,
        actual: String,
    },

    #[error("non-finite entry at ({row}, {col})")]
    NonFinite { row: usize, col: usize },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("line search failed at iteration {iteration}: no Armijo step above {min_step:e}")]
    LineSearchFailed { iteration: usize, min_step: f64 },

    #[error("empty report: at least one trial record is required")]
    EmptyReport,

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Serialization(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, GainError>;

pub(crate) fn shape_mismatch(
    context: &'static str,
    expected: (usize, usize),
    actual: (usize, usize),
) -> GainError {
    GainError::DimensionMismatch {
        context,
        expected: format!("{}x{}", expected.0, expected.1),
        actual: format!("{}x{}", actual.0, actual.1),
    }
}
