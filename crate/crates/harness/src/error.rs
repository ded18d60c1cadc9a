use std::path::PathBuf;

/// Failures surfaced by the command-line harness.
#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error("config: {0}")]
    Config(String),

    /// Missing or inconsistent dataset files and inputs.
    #[error("data: {0}")]
    Data(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Core(#[from] mrf_core::Error),

    #[error("tensor backend: {0}")]
    Tensor(#[from] candle_core::Error),
}

impl HarnessError {
    pub fn config(msg: impl Into<String>) -> Self {
        HarnessError::Config(msg.into())
    }

    pub fn data(msg: impl Into<String>) -> Self {
        HarnessError::Data(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        HarnessError::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit status: 2 for configuration errors, 3 for data errors.
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Config(_) => 2,
            HarnessError::Data(_) | HarnessError::Io { .. } => 3,
            HarnessError::Core(e) => match e {
                mrf_core::Error::Io { .. } | mrf_core::Error::Codec(_) | mrf_core::Error::Format { .. } => 3,
                _ => 1,
            },
            HarnessError::Tensor(_) => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, HarnessError>;
