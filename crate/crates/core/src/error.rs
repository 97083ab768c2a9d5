use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    IoBare(#[from] std::io::Error),

    #[error("malformed NPY data: {0}")]
    Npy(String),

    #[error("row index {index} out of range (corpus has {len} rows)")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("attribute table is missing required columns: {}", .0.join(", "))]
    MissingColumns(Vec<String>),

    #[error("{context}, row {row}: {msg}")]
    Row { context: String, row: usize, msg: String },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid graph: {0}")]
    Graph(String),

    #[error("unknown attribute `{0}`")]
    UnknownAttribute(String),

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("loss became non-finite at epoch {epoch}")]
    Diverged { epoch: usize },

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True when the failure is caused by bad user input rather than the
    /// environment or a numerical breakdown.
    pub fn is_input_error(&self) -> bool {
        !matches!(self, Error::Io { .. } | Error::IoBare(_) | Error::Diverged { .. })
    }
}
