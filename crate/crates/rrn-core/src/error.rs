//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum RrnError {
    /// A numeric input was non-finite or otherwise outside its domain.
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// A landmark pair was requested with identical endpoints.
    #[error("invalid pair: {0}")]
    InvalidPair(String),

    /// A configuration (landmark sets, fold counts, preset names) is inconsistent.
    #[error("configuration error: {0}")]
    Config(String),

    /// A dataset or subject failed validation.
    #[error("dataset error: {0}")]
    Dataset(String),

    /// Interpolation weights do not form a convex combination.
    #[error("invalid weights: {0}")]
    InvalidWeights(String),

    /// Tensor shapes disagree.
    #[error("shape mismatch: expected {expected:?}, got {got:?}")]
    Shape {
        expected: Vec<usize>,
        got: Vec<usize>,
    },

    /// An operation was called out of order (e.g. backward before forward).
    #[error("state error: {0}")]
    State(String),

    /// Training diverged or produced non-finite values.
    #[error("training error: {0}")]
    Training(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, RrnError>;

impl RrnError {
    /// True for errors caused by bad user input rather than a runtime failure.
    pub fn is_usage(&self) -> bool {
        matches!(
            self,
            RrnError::InvalidInput(_)
                | RrnError::InvalidPair(_)
                | RrnError::Config(_)
                | RrnError::Dataset(_)
                | RrnError::InvalidWeights(_)
        )
    }
}
