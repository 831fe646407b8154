use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{context}: {source}")]
    Json {
        context: String,
        #[source]
        source: serde_json::Error,
    },

    #[error("{}: {source}", path.display())]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    /// A record violates a manifest or label invariant.
    #[error("record `{record}`, field `{field}`: {message}")]
    Record {
        record: String,
        field: String,
        message: String,
    },

    #[error("invalid manifest: {0}")]
    Manifest(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    /// An argument lies outside the domain of the function.
    #[error("domain error: {0}")]
    Domain(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("crop edge exceeds image: edge {edge} px, image {width}x{height}")]
    CropTooLarge { edge: u32, width: u32, height: u32 },

    #[error("non-finite loss at step {step}: {detail}")]
    NonFinite { step: usize, detail: String },

    #[error("elevation lookup failed: {0}")]
    Elevation(String),

    #[error("implausible relative altitude {0:.3} m")]
    ImplausibleAltitude(f64),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("plot: {0}")]
    Plot(String),

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn json(context: impl Into<String>, source: serde_json::Error) -> Self {
        Error::Json {
            context: context.into(),
            source,
        }
    }

    pub fn record(record: &str, field: &str, message: impl Into<String>) -> Self {
        Error::Record {
            record: record.to_string(),
            field: field.to_string(),
            message: message.into(),
        }
    }

    /// Process exit code for the command-line front end: 2 for bad input data,
    /// 3 for failures while running a stage.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Json { .. }
            | Error::Image { .. }
            | Error::Record { .. }
            | Error::Manifest(_)
            | Error::Config(_)
            | Error::Domain(_)
            | Error::Shape(_)
            | Error::CropTooLarge { .. }
            | Error::ImplausibleAltitude(_)
            | Error::Checkpoint(_) => 2,
            Error::Io { .. }
            | Error::NonFinite { .. }
            | Error::Elevation(_)
            | Error::Plot(_)
            | Error::Tensor(_) => 3,
        }
    }
}
