use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("layer error: {0}")]
    Layer(String),

    #[error("schedule error: {0}")]
    Schedule(String),

    #[error("training diverged at epoch {epoch}{}: {reason}", fold.map(|f| format!(" (fold {f})")).unwrap_or_default())]
    Training {
        epoch: usize,
        fold: Option<usize>,
        reason: String,
    },

    #[error("format error in {path} at byte {offset}: {reason}")]
    Format {
        path: PathBuf,
        offset: u64,
        reason: String,
    },

    #[error("format error in {path} at row {row}: {reason}")]
    CsvFormat {
        path: PathBuf,
        row: usize,
        reason: String,
    },

    #[error("config error: {0}")]
    Config(String),

    #[error("unsupported structure: {0}")]
    Unsupported(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("parse error at position {position}: {reason}")]
    Parse { position: usize, reason: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Attach a fold index to a training error raised by a single-fold run.
    pub fn in_fold(self, fold: usize) -> Self {
        match self {
            Error::Training { epoch, reason, .. } => Error::Training {
                epoch,
                fold: Some(fold),
                reason,
            },
            other => other,
        }
    }
}
