use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Every malformed-stream condition maps to exactly one of these.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DecodeError {
    #[error("bad magic bytes {0:02x?}")]
    BadMagic([u8; 4]),
    #[error("unsupported container version {0}")]
    UnsupportedVersion(u8),
    #[error("checksum mismatch in {0}")]
    Checksum(&'static str),
    #[error("stream truncated while reading {0}")]
    Truncated(&'static str),
    #[error("symbol model id {found} does not match expected {expected}")]
    ModelMismatch { expected: u16, found: u16 },
    #[error("malformed stream: {0}")]
    Malformed(String),
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("missing predecessor stage `{stage}`: {detail}")]
    Dependency { stage: String, detail: String },
    #[error("data error: {0}")]
    Data(String),
    #[error(transparent)]
    Decode(#[from] DecodeError),
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Image(#[from] image::ImageError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn dependency(stage: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Dependency {
            stage: stage.into(),
            detail: detail.into(),
        }
    }
}
