use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {field}: {reason}")]
    Config { field: String, reason: String },

    #[error("format error in {path}: {field}: {reason}")]
    Format {
        path: PathBuf,
        field: String,
        reason: String,
    },

    #[error("validation failed: {0}")]
    Validation(String),

    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    Dimension {
        context: String,
        expected: String,
        actual: String,
    },

    #[error("no selectable action remains")]
    ExhaustedActions,

    #[error("patch {0} was already visited")]
    RepeatAction(usize),

    #[error("empty instance set: {0}")]
    EmptyInstances(String),

    #[error("non-finite value in {0}")]
    Numeric(String),

    #[error("training diverged at step {step}: {reason}")]
    Training { step: usize, reason: String },

    #[error("no similar pairs found at threshold {tau} during a whole epoch")]
    DegenerateThreshold { tau: f64 },

    #[error("AUC undefined: labels contain a single class")]
    UndefinedAuc,

    #[error("checkpoint component mismatch: expected {expected}, found {found}")]
    ComponentTag { expected: String, found: String },

    #[error("missing or incompatible dependency: {0}")]
    Dependency(String),

    #[error("state error: {0}")]
    State(String),

    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            reason: reason.into(),
        }
    }

    pub(crate) fn dim(
        context: impl Into<String>,
        expected: impl ToString,
        actual: impl ToString,
    ) -> Self {
        Error::Dimension {
            context: context.into(),
            expected: expected.to_string(),
            actual: actual.to_string(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit status used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config { .. } | Error::Validation(_) | Error::Format { .. } | Error::Dimension { .. } => 2,
            Error::Dependency(_) | Error::ComponentTag { .. } | Error::State(_) | Error::Io { .. } => 3,
            _ => 4,
        }
    }
}
