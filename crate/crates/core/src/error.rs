use thiserror::Error;

/// Errors surfaced by the core pipeline.
#[derive(Debug, Error)]
pub enum Error {
    /// Bad numerical input, tagged with the series it came from.
    #[error("data error for series `{series_id}`: {reason}")]
    Data { series_id: String, reason: String },

    /// Invalid configuration or a contract violation between components.
    #[error("configuration error: {0}")]
    Config(String),

    /// A sequence exceeded the model's maximum length.
    #[error("sequence of length {actual} exceeds maximum {max}")]
    Overlength { actual: usize, max: usize },

    /// Loss mask selected no positions.
    #[error("no supervised positions")]
    NoSupervisedPositions,

    /// Placeholder pairs in the template do not match the series supplied.
    #[error("placeholder count != series count: template has {placeholders}, got {series}")]
    PlaceholderMismatch { placeholders: usize, series: usize },

    /// Checkpoint blob failed verification.
    #[error("checkpoint corruption: {0}")]
    Corruption(String),

    /// Parameter blob does not fit the configured component.
    #[error("shape mismatch in component `{component}`: {detail}")]
    Shape { component: String, detail: String },

    /// Remote captioner failure after retries were exhausted.
    #[error("captioner request failed: {0}")]
    Captioner(String),

    /// Malformed record in a dataset file.
    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn data(series_id: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Data {
            series_id: series_id.into(),
            reason: reason.into(),
        }
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}
