use std::path::PathBuf;

use crate::losses::LossBreakdown;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("invalid channel count {channels}: {context}")]
    InvalidChannels { channels: usize, context: String },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("resource error: {0}")]
    Resource(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("ingestion error: {}", .offenders.join("; "))]
    Ingestion { offenders: Vec<String> },

    #[error("training diverged at step {step}: non-finite loss {breakdown:?}")]
    Divergence { step: u64, breakdown: LossBreakdown },

    #[error("corrupt checkpoint {path}: {reason}")]
    CorruptCheckpoint { path: PathBuf, reason: String },

    #[error("incompatible checkpoint {path}: found version {found}, expected {expected}")]
    IncompatibleCheckpoint {
        path: PathBuf,
        found: u32,
        expected: u32,
    },

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image error on {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Whether the failure is caused by a missing or unreadable external resource.
    pub fn is_resource(&self) -> bool {
        matches!(
            self,
            Error::Resource(_)
                | Error::Io { .. }
                | Error::Image { .. }
                | Error::CorruptCheckpoint { .. }
                | Error::IncompatibleCheckpoint { .. }
                | Error::Ingestion { .. }
        )
    }
}
