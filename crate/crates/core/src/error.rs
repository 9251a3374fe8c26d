use std::io;

/// Every failure the library reports. Variants map onto the error kinds of
/// the individual operations (ingestion, pairing, shape, numeric, ...).
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("ingestion error: {0}")]
    Ingestion(String),
    #[error("pairing error: {0}")]
    Pairing(String),
    #[error("format error at byte {offset}: {msg}")]
    Format { offset: u64, msg: String },
    #[error("config error: {0}")]
    Config(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("numeric error in {stage}: {detail}")]
    Numeric { stage: String, detail: String },
    #[error("insufficient samples: {0}")]
    InsufficientSamples(String),
    #[error("range error: {0}")]
    Range(String),
    #[error("generation error: {0}")]
    Generation(String),
    #[error("leakage error: {0}")]
    Leakage(String),
    #[error("I/O error on {path}: {source}")]
    Io { path: String, source: io::Error },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn numeric(stage: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Numeric { stage: stage.into(), detail: detail.into() }
    }

    pub(crate) fn format(offset: u64, msg: impl Into<String>) -> Self {
        Error::Format { offset, msg: msg.into() }
    }

    pub fn io(path: impl AsRef<std::path::Path>, source: io::Error) -> Self {
        Error::Io { path: path.as_ref().display().to_string(), source }
    }
}
