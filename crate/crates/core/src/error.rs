use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Incompatible operand shapes.
    #[error("shape error in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    /// NaN/Inf produced, or a custom backward rule broke its shape contract.
    #[error("numeric fault in {op}: {detail}")]
    NumericFault { op: String, detail: String },

    /// Caller violated an API precondition.
    #[error("usage error: {0}")]
    Usage(String),

    /// A declarative spec or config failed validation; every violation is listed.
    #[error("validation failed: {}", .0.join("; "))]
    Validation(Vec<String>),

    /// Malformed on-disk data (IDX, CIFAR binary, checkpoint).
    #[error("format error in {path}: {detail}")]
    Format { path: PathBuf, detail: String },

    /// Training loss became non-finite.
    #[error("training diverged at epoch {epoch}, step {step}: {detail}")]
    Diverged { epoch: usize, step: usize, detail: String },

    #[error("internal error: {0}")]
    Internal(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn usage(msg: impl Into<String>) -> Self {
        Error::Usage(msg.into())
    }

    pub fn format(path: impl Into<PathBuf>, detail: impl Into<String>) -> Self {
        Error::Format { path: path.into(), detail: detail.into() }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// Short machine-readable category, used by the CLI error line.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Shape { .. } => "shape",
            Error::NumericFault { .. } => "numeric_fault",
            Error::Usage(_) => "usage",
            Error::Validation(_) => "validation",
            Error::Format { .. } => "format",
            Error::Diverged { .. } => "diverged",
            Error::Internal(_) => "internal",
            Error::Io { .. } => "io",
            Error::Json(_) => "json",
        }
    }
}
