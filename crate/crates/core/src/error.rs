use std::path::PathBuf;

use thiserror::Error;

/// Errors raised by the data-quality engine.
///
/// I/O failures are kept separate from validation failures so callers (the
/// CLI in particular) can map them to distinct exit statuses.
#[derive(Debug, Error)]
pub enum DqaError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("csv error in {path}: {message}")]
    Csv { path: PathBuf, message: String },

    #[error("json error in {path}: {message}")]
    Json { path: PathBuf, message: String },

    #[error("malformed header in {path}: {message}")]
    MalformedHeader { path: PathBuf, message: String },

    #[error("invalid manifest: {0}")]
    Manifest(String),

    #[error("invalid grouper registry: {0}")]
    Registry(String),

    #[error("invalid rule configuration: {0}")]
    RuleConfig(String),

    #[error("invalid check configuration: {0}")]
    CheckConfig(String),

    #[error("no metadata schema for category {0}")]
    NoMetadataSchema(String),

    #[error("report coverage violation: {0}")]
    Coverage(String),

    #[error("adjudication form row {row}: {message}")]
    Form { row: usize, message: String },

    #[error("invalid synth spec field `{field}`: {message}")]
    SynthSpec { field: String, message: String },

    #[error("{0}")]
    Invalid(String),
}

impl DqaError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        DqaError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn json(path: impl Into<PathBuf>, err: impl std::fmt::Display) -> Self {
        DqaError::Json {
            path: path.into(),
            message: err.to_string(),
        }
    }

    /// Filesystem failures inside the csv reader surface as `Io`.
    pub fn csv(path: impl Into<PathBuf>, err: csv::Error) -> Self {
        let message = err.to_string();
        match err.into_kind() {
            csv::ErrorKind::Io(source) => DqaError::Io {
                path: path.into(),
                source,
            },
            _ => DqaError::Csv {
                path: path.into(),
                message,
            },
        }
    }

    /// True when the failure came from the filesystem rather than from the
    /// content of an input.
    pub fn is_io(&self) -> bool {
        matches!(self, DqaError::Io { .. })
    }
}

pub type Result<T, E = DqaError> = std::result::Result<T, E>;
