use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {layer}: {detail}")]
    Shape { layer: String, detail: String },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("value is not recorded on this graph: {0}")]
    Unrecorded(String),

    #[error("{what} = {value} is outside {range}")]
    OutOfRange {
        what: &'static str,
        value: String,
        range: String,
    },

    #[error("unknown class id {0}")]
    UnknownClass(usize),

    #[error("invalid format: {0}")]
    Format(String),

    #[error("config key `{key}`: {constraint}")]
    Config { key: String, constraint: String },

    #[error("invariant violated: {0}")]
    Invariant(String),

    #[error("dataset: {0}")]
    Dataset(String),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(layer: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Shape {
            layer: layer.into(),
            detail: detail.into(),
        }
    }

    pub(crate) fn out_of_range(
        what: &'static str,
        value: impl ToString,
        range: impl Into<String>,
    ) -> Self {
        Error::OutOfRange {
            what,
            value: value.to_string(),
            range: range.into(),
        }
    }
}
