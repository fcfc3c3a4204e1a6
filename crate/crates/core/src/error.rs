use std::path::PathBuf;

use thiserror::Error;

/// Every failure the crate can report.
#[derive(Debug, Error)]
pub enum Error {
    #[error("{kernel}: shape mismatch: {detail}")]
    Shape { kernel: &'static str, detail: String },

    #[error("unknown kernel id `{0}`")]
    UnknownKernel(String),

    #[error("{kernel}: produced a non-finite value")]
    NonFinite { kernel: &'static str },

    #[error("backward: loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("backward: no computation record for this loss")]
    NoRecord,

    #[error("backward: computation record already consumed")]
    RecordConsumed,

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("{}: corrupt format ({detail})", path.display())]
    CorruptFormat { path: PathBuf, detail: String },

    #[error("{}: unsupported format version {found} (expected {expected})", path.display())]
    VersionMismatch { path: PathBuf, found: u16, expected: u16 },

    #[error("{}: truncated payload ({detail})", path.display())]
    Truncated { path: PathBuf, detail: String },

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("config: {0}")]
    Config(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("non-finite gradient for parameter `{0}`")]
    NonFiniteGradient(String),
}

impl Error {
    pub(crate) fn shape(kernel: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape { kernel, detail: detail.into() }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// Short machine-readable kind, used by the CLI error line.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Shape { .. } => "shape",
            Error::UnknownKernel(_) => "unknown-kernel",
            Error::NonFinite { .. } => "non-finite",
            Error::NonScalarLoss(_) => "non-scalar-loss",
            Error::NoRecord => "no-record",
            Error::RecordConsumed => "record-consumed",
            Error::InvalidArgument(_) => "invalid-argument",
            Error::CorruptFormat { .. } => "corrupt-format",
            Error::VersionMismatch { .. } => "version-mismatch",
            Error::Truncated { .. } => "truncated",
            Error::Io { .. } => "io",
            Error::Config(_) => "config",
            Error::Checkpoint(_) => "checkpoint",
            Error::NonFiniteGradient(_) => "non-finite-gradient",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
