use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// A field or argument is outside its valid range.
    #[error("invalid {field}: {reason}")]
    Invalid { field: String, reason: String },

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("line {line}: {message}")]
    Parse { line: u64, message: String },

    #[error("label-limited partition failed after {attempts} attempts: {reason}")]
    PartitionExhausted { attempts: usize, reason: String },

    #[error("non-finite value at iteration {t}: {what}")]
    NonFinite { t: usize, what: String },

    /// Missing recorded data that an analysis step depends on.
    #[error("missing data: {0}")]
    Missing(String),

    #[error("search did not revisit a pair within {max_iters} iterations")]
    SearchExhausted {
        max_iters: usize,
        history: Vec<(u32, u32, f64)>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Invalid {
            field: field.into(),
            reason: reason.into(),
        }
    }
}
