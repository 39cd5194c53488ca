use thiserror::Error;

/// Errors raised by the WDA pipeline.
///
/// Non-convergence is deliberately absent: solvers report it through a
/// `converged` flag on their result and hand back the best iterate.
#[derive(Debug, Error)]
pub enum WdaError {
    #[error("dimension mismatch in {context}: expected {expected}, found {found}")]
    Dimension {
        context: &'static str,
        expected: String,
        found: String,
    },

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("numerical failure: {0}")]
    Numeric(String),

    #[error("parse error at row {row}, column {column}: {message}")]
    Parse { row: usize, column: usize, message: String },

    #[error("invariant violated: {0}")]
    Invariant(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, WdaError>;

impl WdaError {
    pub(crate) fn dim(context: &'static str, expected: impl ToString, found: impl ToString) -> Self {
        WdaError::Dimension {
            context,
            expected: expected.to_string(),
            found: found.to_string(),
        }
    }
}
