use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum SimError {
    #[error(transparent)]
    Core(#[from] tqte::Error),

    /// Invalid experiment or DGP specification.
    #[error("invalid specification: {0}")]
    Spec(String),

    /// Config file that fails to parse; `path` is the JSON field path.
    #[error("{file}: {path}: {message}")]
    Config { file: String, path: String, message: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("checkpoint {path}: {message}")]
    Checkpoint { path: PathBuf, message: String },
}

impl SimError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        SimError::Io {
            path: path.into(),
            source,
        }
    }

    /// Whether the failure is a configuration problem rather than a
    /// runtime estimation failure.
    pub fn is_config(&self) -> bool {
        matches!(self, SimError::Spec(_) | SimError::Config { .. })
    }
}

pub type SimResult<T> = std::result::Result<T, SimError>;
