use mft_autograd::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MftError {
    #[error(transparent)]
    Tensor(#[from] TensorError),

    #[error("line {line}: malformed record: {message}")]
    Parse { line: usize, message: String },

    #[error("line {line}: schema error: {message}")]
    Schema { line: usize, message: String },

    #[error("data error: {0}")]
    Data(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

/// Coarse classification used for process exit codes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ErrorCategory {
    Usage,
    Data,
    Numeric,
}

impl MftError {
    pub fn category(&self) -> ErrorCategory {
        match self {
            MftError::Tensor(TensorError::NonFinite { .. }) | MftError::Numeric(_) => {
                ErrorCategory::Numeric
            }
            MftError::Config(_) => ErrorCategory::Usage,
            _ => ErrorCategory::Data,
        }
    }
}

pub type Result<T> = std::result::Result<T, MftError>;
