use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = DiveError> = std::result::Result<T, E>;

/// Every failure the toolkit reports. Variants follow the error classes the
/// operations promise (dimension, numeric, parameter, ...), so callers can
/// map them onto exit codes.
#[derive(Debug, Error)]
pub enum DiveError {
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("parameter error: {0}")]
    Parameter(String),
    #[error("state error: {0}")]
    State(String),
    #[error("index error: {0}")]
    Index(String),
    #[error("unknown domain `{0}`")]
    Registry(String),
    #[error("capacity error: {0}")]
    Capacity(String),
    #[error("statistics error: {0}")]
    Statistics(String),
    #[error("undefined correlation: {0}")]
    UndefinedCorrelation(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("consistency error: {0}")]
    Consistency(String),
    #[error("checkpoint format error: {0}")]
    Format(String),
    #[error("checkpoint version {found} is not supported (expected {expected})")]
    Compatibility { found: u32, expected: u32 },
    #[error("{context}: {source}")]
    Context {
        context: String,
        #[source]
        source: Box<DiveError>,
    },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl DiveError {
    pub fn with_context(self, context: impl Into<String>) -> DiveError {
        DiveError::Context {
            context: context.into(),
            source: Box::new(self),
        }
    }

    /// The innermost error, looking through context wrappers.
    pub fn root(&self) -> &DiveError {
        match self {
            DiveError::Context { source, .. } => source.root(),
            other => other,
        }
    }

    pub fn is_numeric(&self) -> bool {
        matches!(self.root(), DiveError::Numeric(_))
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> DiveError {
        DiveError::Io {
            path: path.into(),
            source,
        }
    }
}
