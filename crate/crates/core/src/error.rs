use std::path::PathBuf;

/// Errors produced anywhere in the toolkit.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("invalid label: {0}")]
    Label(String),

    #[error("index {index} out of range for length {len}")]
    Index { index: usize, len: usize },

    #[error("{0}")]
    Unsupported(String),

    #[error("no scored classes: every class is absent from the confusion matrix")]
    NoClasses,

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("non-finite loss at iteration {iter}; batch dumped to {}", dump.display())]
    NonFinite { iter: usize, dump: PathBuf },

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{}: {message}", path.display())]
    Decode { path: PathBuf, message: String },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn decode(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Decode {
            path: path.into(),
            message: message.into(),
        }
    }

    /// Short stable identifier for the error class, used in machine-readable output.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Shape(_) => "shape",
            Error::Domain(_) => "domain",
            Error::Config(_) => "config",
            Error::Label(_) => "label",
            Error::Index { .. } => "index",
            Error::Unsupported(_) => "unsupported",
            Error::NoClasses => "no-classes",
            Error::Checkpoint(_) => "checkpoint",
            Error::NonFinite { .. } => "non-finite",
            Error::Io { .. } => "io",
            Error::Decode { .. } => "decode",
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
