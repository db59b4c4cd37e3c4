use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, XensError>;

#[derive(Debug, Error)]
pub enum XensError {
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("missing directory: {0}")]
    MissingDirectory(PathBuf),

    #[error("no decodable images found in any source")]
    NoImages,

    #[error("image decode failed for {path}: {reason}")]
    Decode { path: PathBuf, reason: String },

    #[error("empty class: {0}")]
    EmptyClass(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("parse error in {context}: {message}")]
    Parse { context: String, message: String },

    #[error("archive parameter problems: {}", .0.join("; "))]
    ArchiveParams(Vec<String>),

    #[error("checkpoint integrity failure: {0}")]
    Integrity(String),

    #[error("checkpoint metadata: {0}")]
    Metadata(String),

    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },

    #[error("missing input: {0}")]
    Missing(String),
}

impl XensError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        XensError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn parse(context: impl Into<String>, message: impl Into<String>) -> Self {
        XensError::Parse {
            context: context.into(),
            message: message.into(),
        }
    }

    /// Short machine-readable category, used by the CLI's one-line error output.
    pub fn kind(&self) -> &'static str {
        match self {
            XensError::Io { .. } => "io",
            XensError::MissingDirectory(_) => "missing-directory",
            XensError::NoImages => "no-images",
            XensError::Decode { .. } => "decode",
            XensError::EmptyClass(_) => "empty-class",
            XensError::InvalidArgument(_) => "invalid-argument",
            XensError::Shape(_) => "shape",
            XensError::Parse { .. } => "parse",
            XensError::ArchiveParams(_) => "archive-params",
            XensError::Integrity(_) => "integrity",
            XensError::Metadata(_) => "metadata",
            XensError::NonFiniteLoss { .. } => "non-finite-loss",
            XensError::Missing(_) => "missing",
        }
    }
}
