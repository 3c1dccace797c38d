use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the training and scoring pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("schema error: missing column `{0}`")]
    MissingColumn(String),

    #[error("parse error at row {row}, column `{column}`: {message}")]
    Parse {
        row: usize,
        column: String,
        message: String,
    },

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("non-finite input data: {0}")]
    Data(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("{stage} diverged at epoch {epoch}: non-finite loss")]
    Divergence { stage: String, epoch: usize },

    #[error("non-finite activation in layer `{0}`")]
    Activation(String),

    #[error("training error: {0}")]
    Training(String),

    #[error("calibration error: {0}")]
    Calibration(String),

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("stratification error: {0}")]
    Stratification(String),

    #[error("artifact error: {0}")]
    Artifact(String),

    #[error("artifact format version {found} is not supported (expected {expected})")]
    ArtifactVersion { found: u32, expected: u32 },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by bad user input (files, schemas, versions)
    /// rather than numeric failures during fitting.
    pub fn is_input_error(&self) -> bool {
        matches!(
            self,
            Error::MissingColumn(_)
                | Error::Parse { .. }
                | Error::Io { .. }
                | Error::Csv(_)
                | Error::Json(_)
                | Error::Artifact(_)
                | Error::ArtifactVersion { .. }
                | Error::Parameter(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
