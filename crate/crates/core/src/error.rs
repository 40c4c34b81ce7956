use std::path::PathBuf;

/// Errors raised anywhere in the lab.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("structural mismatch: {0}")]
    StructuralMismatch(String),

    #[error("unsupported operation in graph: {0}")]
    Unsupported(String),

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("corpus generation failed: {0}")]
    Generation(String),

    #[error("training diverged at step {step}: {reason}")]
    Divergence { step: usize, reason: String },

    #[error("degenerate direction: {0}")]
    DegenerateDirection(String),

    #[error("checkpoint format error at byte {offset}: {reason}")]
    Format { offset: u64, reason: String },

    #[error("io error on {}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("serialization error: {0}")]
    Serde(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub(crate) fn arg(msg: impl Into<String>) -> Self {
        Error::Argument(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn is_divergence(&self) -> bool {
        matches!(self, Error::Divergence { .. })
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Serde(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
