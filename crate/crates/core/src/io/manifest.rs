use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{DcbContainer, RoiMask};
use crate::error::{Error, Result};

/// One subject of a cohort. Paths are relative to the manifest's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub id: String,
    /// `"CN"` or `"AD"`.
    pub label: String,
    pub volume: PathBuf,
    /// ROI name → mask file.
    pub rois: BTreeMap<String, PathBuf>,
}

impl ManifestEntry {
    pub fn label_value(&self) -> Result<u8> {
        match self.label.as_str() {
            "CN" => Ok(0),
            "AD" => Ok(1),
            other => Err(Error::Config(format!("subject {}: unknown label {other:?}", self.id))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CohortManifest {
    pub subjects: Vec<ManifestEntry>,
    /// Free-form generator description (spec echo, seed, tool version).
    pub provenance: serde_json::Value,
}

pub fn label_name(label: u8) -> &'static str {
    if label == 1 {
        "AD"
    } else {
        "CN"
    }
}

impl CohortManifest {
    pub fn read(path: &Path) -> Result<Self> {
        let bytes = super::read_file(path)?;
        let m: Self = serde_json::from_slice(&bytes).map_err(|e| Error::Json {
            path: path.to_path_buf(),
            source: e,
        })?;
        for s in &m.subjects {
            s.label_value()?;
        }
        Ok(m)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut bytes = serde_json::to_vec_pretty(self).expect("manifest serialises");
        bytes.push(b'\n');
        super::write_atomic(path, &bytes)
    }

    /// ROI names present for every subject, sorted.
    pub fn roi_names(&self) -> Vec<String> {
        let mut names: Vec<String> = self
            .subjects
            .first()
            .map(|s| s.rois.keys().cloned().collect())
            .unwrap_or_default();
        names.retain(|n| self.subjects.iter().all(|s| s.rois.contains_key(n)));
        names
    }
}

/// A subject held in memory: its volume and named ROI masks.
#[derive(Debug, Clone)]
pub struct Subject {
    pub id: String,
    pub label: u8,
    pub volume: DcbContainer,
    pub rois: BTreeMap<String, RoiMask>,
}

/// Reads every volume and mask listed in the manifest at `path`.
pub fn load_subjects(path: &Path) -> Result<Vec<Subject>> {
    let manifest = CohortManifest::read(path)?;
    let dir = path.parent().unwrap_or(Path::new("."));
    manifest
        .subjects
        .iter()
        .map(|e| {
            let volume = DcbContainer::read(&dir.join(&e.volume))?;
            let mut rois = BTreeMap::new();
            for (name, p) in &e.rois {
                let mask = RoiMask::read(&dir.join(p))?;
                if mask.dims != volume.dims {
                    return Err(Error::Shape(format!(
                        "subject {}: mask {name} has dims {:?}, volume {:?}",
                        e.id, mask.dims, volume.dims
                    )));
                }
                rois.insert(name.clone(), mask);
            }
            Ok(Subject {
                id: e.id.clone(),
                label: e.label_value()?,
                volume,
                rois,
            })
        })
        .collect()
}
