use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid value for `{field}`: {reason}")]
    Validation { field: String, reason: String },

    #[error("shape mismatch in {context}: expected {expected}, got {got}")]
    Shape {
        context: &'static str,
        expected: String,
        got: String,
    },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("{path}:{line}: {reason}")]
    Parse {
        path: String,
        line: usize,
        reason: String,
    },

    #[error("malformed {kind} file {path}: {reason}")]
    Format {
        kind: &'static str,
        path: PathBuf,
        reason: String,
    },

    #[error("feature file for utterance `{id}` is missing: {path}")]
    MissingFeatures { id: String, path: PathBuf },

    #[error("duplicate utterance id `{0}`")]
    DuplicateId(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("training diverged: {component} produced a non-finite loss at step {step}")]
    Diverged { component: String, step: u64 },

    #[error("missing loss component `{0}`")]
    MissingPart(&'static str),

    #[error("{0}")]
    Data(String),

    #[error("stage `{stage}` failed (log: {log}): {reason}")]
    Stage {
        stage: String,
        log: PathBuf,
        reason: String,
    },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn validation(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Validation {
            field: field.into(),
            reason: reason.into(),
        }
    }

    pub fn shape(context: &'static str, expected: impl ToString, got: impl ToString) -> Self {
        Error::Shape {
            context,
            expected: expected.to_string(),
            got: got.to_string(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Stable machine-readable code printed by the command-line tool.
    pub fn code(&self) -> &'static str {
        match self {
            Error::Validation { .. } => "E_VALIDATION",
            Error::Shape { .. } => "E_SHAPE",
            Error::Config(_) => "E_CONFIG",
            Error::Parse { .. } => "E_PARSE",
            Error::Format { .. } => "E_FORMAT",
            Error::MissingFeatures { .. } => "E_MISSING_FEATURES",
            Error::DuplicateId(_) => "E_DUPLICATE_ID",
            Error::NonFinite(_) => "E_NON_FINITE",
            Error::Diverged { .. } => "E_DIVERGED",
            Error::MissingPart(_) => "E_MISSING_PART",
            Error::Data(_) => "E_DATA",
            Error::Stage { .. } => "E_STAGE",
            Error::Io { .. } => "E_IO",
        }
    }

    /// Whether the failure stems from user input rather than a runtime fault.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Validation { .. }
                | Error::Shape { .. }
                | Error::Config(_)
                | Error::Parse { .. }
                | Error::Format { .. }
                | Error::DuplicateId(_)
        )
    }
}
