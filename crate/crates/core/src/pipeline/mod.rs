//! Staged training, checkpoints, encode/decode entry points and reports.

pub mod codec;
pub mod config;
pub mod manifest;
pub mod report;
pub mod stages;
pub mod store;

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub use codec::CodecModels;
pub use config::{ExperimentConfig, StageConfig, OUTPUT_ENV};
pub use manifest::{ingest, DatasetManifest, Split};
pub use report::EvalReport;
pub use stages::{Pipeline, Stage};
pub use store::Store;

/// Scalars that can be written to and read from checkpoints.
pub trait StoredScalar: Scalar + Serialize + DeserializeOwned {}

impl<T: Scalar + Serialize + DeserializeOwned> StoredScalar for T {}

/// Writes through a sibling temp file and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}
