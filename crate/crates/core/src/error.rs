use std::path::PathBuf;

use thiserror::Error;

/// Broad failure class, used to pick a process exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Config,
    Data,
    Provider,
    Numerical,
    Integrity,
}

impl ErrorClass {
    pub fn exit_code(self) -> i32 {
        match self {
            ErrorClass::Config => 2,
            ErrorClass::Data => 3,
            ErrorClass::Provider => 4,
            ErrorClass::Numerical => 5,
            ErrorClass::Integrity => 6,
        }
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("line {line}: {message}")]
    Malformed { line: usize, message: String },

    #[error("line {line}: duplicate utterance id {id:?}")]
    DuplicateId { line: usize, id: String },

    #[error("line {line}: utterance {id:?} has empty text")]
    EmptyText { line: usize, id: String },

    #[error("line {line}: unknown {field} value {value:?}")]
    UnknownValue {
        line: usize,
        field: &'static str,
        value: String,
    },

    #[error("questionnaire header mismatch: {0}")]
    HeaderMismatch(String),

    #[error("student {student_id:?}, column {column:?}: non-numeric value {value:?}")]
    NonNumeric {
        student_id: String,
        column: String,
        value: String,
    },

    #[error("student {student_id:?}, column {column:?}: response {value} outside [{min}, {max}]")]
    OutOfBounds {
        student_id: String,
        column: String,
        value: f64,
        min: f64,
        max: f64,
    },

    #[error("student {student_id:?}: missing response for {column:?}")]
    MissingResponse { student_id: String, column: String },

    #[error("no vector for utterance {0:?}")]
    MissingVector(String),

    #[error("not a vector store")]
    NotAVectorStore,

    #[error("vector store truncated: {0}")]
    Truncated(String),

    #[error("vector store header inconsistent: {0}")]
    HeaderInconsistent(String),

    #[error("utterance {0:?} has an all-zero vector")]
    ZeroVector(String),

    #[error("utterance {0:?} has a non-finite vector entry")]
    NonFinite(String),

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("embedding provider: {0}")]
    Provider(String),

    #[error("invalid parameters: {0}")]
    InvalidParams(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("need at least {needed} points, found {found}")]
    TooFewPoints { needed: usize, found: usize },

    #[error("did not converge (residual {residual:.3e})")]
    NonConvergence { residual: f64 },

    #[error("undefined: {0}")]
    Undefined(String),

    #[error("no valid trials")]
    NoValidTrials,

    #[error("configuration: {0}")]
    Config(String),

    #[error("integrity: {0}")]
    Integrity(String),

    #[error("stage {stage}: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn class(&self) -> ErrorClass {
        match self {
            Error::Config(_) | Error::InvalidParams(_) => ErrorClass::Config,
            Error::Provider(_) => ErrorClass::Provider,
            Error::NonConvergence { .. } | Error::Undefined(_) | Error::NoValidTrials => {
                ErrorClass::Numerical
            }
            Error::Integrity(_) => ErrorClass::Integrity,
            Error::Stage { source, .. } => source.class(),
            _ => ErrorClass::Data,
        }
    }

    pub fn exit_code(&self) -> i32 {
        self.class().exit_code()
    }

    pub(crate) fn in_stage(self, stage: &str) -> Self {
        Error::Stage {
            stage: stage.to_string(),
            source: Box::new(self),
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
