use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Core(#[from] timeq_core::Error),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("missing file {0}")]
    Missing(String),

    #[error("schema mismatch in {path}: {detail}")]
    Schema { path: String, detail: String },

    #[error("output directory is locked by another run ({0})")]
    Locked(String),
}

pub type Result<T> = std::result::Result<T, HarnessError>;

impl HarnessError {
    pub fn io(path: impl AsRef<Path>, source: std::io::Error) -> Self {
        HarnessError::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    pub fn schema(path: impl AsRef<Path>, detail: impl ToString) -> Self {
        HarnessError::Schema {
            path: path.as_ref().display().to_string(),
            detail: detail.to_string(),
        }
    }

    /// Process exit status: 2 for bad configuration, 3 for anything that
    /// went wrong while running.
    pub fn exit_code(&self) -> u8 {
        match self {
            HarnessError::Config(_) | HarnessError::Core(timeq_core::Error::Config(_)) => 2,
            _ => 3,
        }
    }
}
