use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("unknown configuration `{0}`")]
    ConfigNotFound(String),

    #[error("shape mismatch in {what}: expected {expected}, got {actual}")]
    Shape {
        what: String,
        expected: String,
        actual: String,
    },

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("value out of range: {0}")]
    Range(String),

    #[error("framing error: {0}")]
    Framing(String),

    #[error("bad file format: {0}")]
    Format(String),

    #[error("missing weight record `{0}`")]
    MissingRecord(String),

    #[error("weight file was written for a different configuration (file {file}, config {config})")]
    Fingerprint { file: String, config: String },

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("audio: {0}")]
    Audio(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(
        what: impl Into<String>,
        expected: impl std::fmt::Display,
        actual: impl std::fmt::Display,
    ) -> Self {
        Error::Shape {
            what: what.into(),
            expected: expected.to_string(),
            actual: actual.to_string(),
        }
    }
}
