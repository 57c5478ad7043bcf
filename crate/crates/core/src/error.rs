use std::path::PathBuf;

/// Errors raised by estimation, fitting and data handling.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("row {row}: {message}")]
    Row { row: usize, message: String },

    #[error("infeasible fold stratification: stratum `{stratum}` has {available} unit(s) but {required} are required")]
    Stratification {
        stratum: String,
        available: usize,
        required: usize,
    },

    #[error("empty estimation stratum: {0}")]
    EmptyStratum(String),

    #[error("singular linear system: {0}")]
    Singular(String),

    #[error("entropy balancing infeasible: constraint {constraint} has residual {residual:e} after {iterations} Newton steps")]
    BalanceInfeasible {
        constraint: usize,
        residual: f64,
        iterations: usize,
    },

    #[error("positivity violated: {0}")]
    Positivity(String),

    #[error("assumption violated: {0}")]
    Assumption(String),

    #[error("identity check failed: {what} (difference {difference:e})")]
    IdentityMismatch { what: String, difference: f64 },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
