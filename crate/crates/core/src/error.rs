use thiserror::Error;

pub type Result<T> = std::result::Result<T, CcsError>;

#[derive(Debug, Error)]
pub enum CcsError {
    #[error("dimension mismatch in {op}: {left:?} vs {right:?}")]
    Dimension {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    /// A caller broke an operation precondition.
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("parse error at byte {offset}: {message}")]
    Parse { offset: u64, message: String },

    #[error("integrity error: {0}")]
    Integrity(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl CcsError {
    pub(crate) fn dim(op: &'static str, left: &[usize], right: &[usize]) -> Self {
        CcsError::Dimension {
            op,
            left: left.to_vec(),
            right: right.to_vec(),
        }
    }
}
