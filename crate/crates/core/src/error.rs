use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid case `{case_id}`: {reason}")]
    InvalidCase { case_id: String, reason: String },

    #[error("invalid catalog: {0}")]
    InvalidCatalog(String),

    #[error("unknown activity `{0}`")]
    UnknownActivity(String),

    #[error("value `{value}` is not in the `{field}` vocabulary")]
    UnknownCategory { field: String, value: String },

    #[error("non-finite value for `{0}`")]
    NonFinite(String),

    #[error("invalid argument `{arg}`: {reason}")]
    InvalidArgument { arg: &'static str, reason: String },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite gradient in parameter `{0}`")]
    NonFiniteGradient(String),

    #[error("non-finite loss at epoch {epoch}, step {step} (last finite loss {last_finite:?})")]
    NonFiniteLoss {
        epoch: usize,
        step: usize,
        last_finite: Option<f64>,
    },

    #[error("backward called without a cached train-mode forward pass")]
    NoForwardCache,

    #[error("invalid scenario: {0}")]
    InvalidScenario(String),

    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),

    #[error("unsupported {what} version {found} (expected {expected})")]
    Version {
        what: &'static str,
        found: u32,
        expected: u32,
    },

    #[error("catalog hash mismatch: checkpoint has {found}, expected {expected}")]
    CatalogMismatch { expected: String, found: String },

    #[error("not found: {0}")]
    NotFound(String),

    #[error("end of case at minute {0}")]
    EndOfCase(u32),

    #[error("session mode error: {0}")]
    Mode(String),

    #[error("session closed")]
    Closed,

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

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

    pub(crate) fn invalid_case(case_id: &str, reason: impl Into<String>) -> Self {
        Error::InvalidCase {
            case_id: case_id.to_string(),
            reason: reason.into(),
        }
    }
}
