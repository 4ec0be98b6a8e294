//! File formats, diffusion-cube extraction and PSIC export.
//!
//! Every write goes to a temporary file in the destination directory which
//! is then renamed over the target, so readers never see partial files.

mod container;
mod cubes;
mod export;
mod manifest;
mod model;

pub use container::{DcbContainer, RoiMask};
pub use cubes::{
    assemble_sh_cubes, dcs_to_sh, extract_dcs, fit_volume_sh, interior_voxels, DiffusionCube, ShVolume,
};
pub use export::{export_psic, pgm_bytes, PsicMap};
pub use manifest::{label_name, load_subjects, CohortManifest, ManifestEntry, Subject};
pub use model::{ModelFile, ModelHeader};

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

/// Writes `bytes` to `path` through a temporary sibling and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(path, e))?;
    tmp.as_file().sync_all().map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

pub(crate) fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}
