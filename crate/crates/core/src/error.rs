//! Crate-wide error type.

use std::path::PathBuf;
use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("json error at {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("image error at {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
    #[error("config error (line {line}): {msg}")]
    Config { line: usize, msg: String },
    #[error("unknown identity '{id}'")]
    UnknownIdentity { id: String },
    #[error("joint {joint} is behind the camera")]
    JointBehindCamera { joint: usize },
    #[error("bone {bone} is degenerate (zero length)")]
    DegenerateBone { bone: usize },
    #[error("skeleton is not canonicalized (root norm {norm})")]
    NonCanonicalSkeleton { norm: f32 },
    #[error("{0}")]
    Data(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }
}
