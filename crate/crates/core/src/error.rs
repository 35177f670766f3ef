use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the inference engine.
#[derive(Debug, Error)]
pub enum TpfError {
    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },
    #[error("invalid corpus: {0}")]
    Validation(String),
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl TpfError {
    pub(crate) fn arg(msg: impl Into<String>) -> Self {
        TpfError::Argument(msg.into())
    }

    pub(crate) fn numeric(msg: impl Into<String>) -> Self {
        TpfError::Numeric(msg.into())
    }

    /// True for failures caused by the numbers rather than the inputs.
    pub fn is_numeric(&self) -> bool {
        matches!(self, TpfError::Numeric(_))
    }

    pub fn is_io(&self) -> bool {
        matches!(
            self,
            TpfError::Io(_) | TpfError::Parse { .. } | TpfError::Checkpoint(_) | TpfError::Json(_)
        )
    }
}

pub type Result<T, E = TpfError> = std::result::Result<T, E>;
