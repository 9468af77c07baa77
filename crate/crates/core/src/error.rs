use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("missing image: {0}")]
    MissingImage(String),

    #[error("storage error at {path}: {message}")]
    Storage { path: PathBuf, message: String },

    #[error("unknown relation `{0}`")]
    UnknownRelation(String),

    #[error("distractor pool exhausted: needed {needed}, found {found}")]
    PoolExhausted { needed: usize, found: usize },

    #[error("image generation failed after {attempts} attempts: {reason}")]
    Generation { attempts: usize, reason: String },

    #[error("schema error{}: {message}", line.map(|l| format!(" at line {l}")).unwrap_or_default())]
    Schema { line: Option<usize>, message: String },

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("score channel missing: {0}")]
    ChannelMissing(String),

    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("alignment error: {0}")]
    Alignment(String),

    #[error("choice {choice}: {source}")]
    Choice {
        choice: usize,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub fn schema(line: Option<usize>, msg: impl Into<String>) -> Self {
        Error::Schema {
            line,
            message: msg.into(),
        }
    }

    pub fn storage(path: impl Into<PathBuf>, msg: impl ToString) -> Self {
        Error::Storage {
            path: path.into(),
            message: msg.to_string(),
        }
    }

    /// Stable machine-readable tag, used in the CLI's JSON error lines.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::InvalidInput(_) => "InvalidInput",
            Error::MissingImage(_) => "MissingImage",
            Error::Storage { .. } => "StorageError",
            Error::UnknownRelation(_) => "UnknownRelation",
            Error::PoolExhausted { .. } => "PoolExhausted",
            Error::Generation { .. } => "GenerationError",
            Error::Schema { .. } => "SchemaError",
            Error::Dimension(_) => "DimensionError",
            Error::ChannelMissing(_) => "ChannelMissing",
            Error::Numerical(_) => "NumericalError",
            Error::Alignment(_) => "AlignmentError",
            Error::Choice { source, .. } => source.kind(),
            Error::Io(_) => "IoError",
            Error::Json(_) => "JsonError",
        }
    }
}
