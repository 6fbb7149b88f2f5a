//! File formats used at module boundaries. Everything is byte-deterministic:
//! writing the same data twice produces identical files, and text formats
//! print `f64` with the shortest round-tripping representation.

mod bin;
pub mod cams;
pub mod checkpoint;
pub mod metrics;
pub mod pfm;
pub mod ply;
pub mod ppm;
pub mod sidecar;

use crate::{Error, Result};
use std::io::Read;
use std::path::Path;

pub(crate) fn read_file(path: &Path) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut buf))
        .map_err(|e| Error::io(path, e))?;
    Ok(buf)
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}
