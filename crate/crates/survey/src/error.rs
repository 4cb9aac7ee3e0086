use std::path::PathBuf;

pub type Result<T, E = SurveyError> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum SurveyError {
    /// A submitted response failed validation; `field` names the culprit.
    #[error("invalid {field}: {message}")]
    Validation { field: String, message: String },
    #[error("configuration error: {0}")]
    Config(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Core(#[from] legible_core::Error),
}

impl SurveyError {
    pub fn invalid(field: impl Into<String>, message: impl Into<String>) -> Self {
        SurveyError::Validation {
            field: field.into(),
            message: message.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        SurveyError::Io {
            path: path.into(),
            source,
        }
    }
}
