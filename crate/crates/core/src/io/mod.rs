//! On-disk formats: JSON manifests, binary feature stores and checkpoints,
//! word-embedding text files, and report writers.

mod binary;
pub mod checkpoint;
pub mod embeddings;
pub mod features;
pub mod manifest;
pub mod report;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use embeddings::{load_embeddings, MissingPolicy};
pub use features::{load_features, save_features};
pub use manifest::{load_manifest, normalize_name, save_manifest};

use std::path::Path;

use crate::error::{Error, Result};

pub(crate) fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

pub(crate) fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

/// Writes through a sibling temporary file so readers never see a partial file.
pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}
