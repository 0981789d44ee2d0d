//! Contrast-unity training for partially-supervised temporal sentence
//! grounding, operating on pre-extracted feature tensors.
//!
//! The implicit stage ([`trainer::train_implicit`]) learns event/query
//! alignment from single-frame or short-clip labels and exports interval
//! pseudo-labels; the explicit stage ([`trainer::train_explicit`]) fits a
//! standalone regressor on those pseudo-labels and is the only model used at
//! inference.

pub mod cluster;
pub mod dataio;
pub mod error;
pub mod evalkit;
pub mod losses;
pub mod model;
pub mod tensorcore;
pub mod trainer;

pub use error::{Error, Result};

use std::path::Path;

/// Writes `bytes` to a sibling temp file, then renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}
