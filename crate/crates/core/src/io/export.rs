//! PSIC maps: a one-channel container plus 8-bit PGM slices.

use std::path::{Path, PathBuf};

use super::{DcbContainer, RoiMask};
use crate::error::{Error, Result};

/// Per-voxel scores over a mask; voxels outside the mask hold 0.
#[derive(Debug, Clone, PartialEq)]
pub struct PsicMap {
    pub dims: [usize; 3],
    pub scores: Vec<f64>,
    pub mask: RoiMask,
}

impl PsicMap {
    pub fn new(mask: RoiMask) -> Self {
        let n = mask.data.len();
        Self {
            dims: mask.dims,
            scores: vec![0.0; n],
            mask,
        }
    }

    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        (x * self.dims[1] + y) * self.dims[2] + z
    }

    pub fn set(&mut self, c: [usize; 3], score: f64) {
        let i = self.index(c[0], c[1], c[2]);
        self.scores[i] = score;
    }

    pub fn to_container(&self) -> Result<DcbContainer> {
        let data = self
            .scores
            .iter()
            .zip(&self.mask.data)
            .map(|(&s, &m)| if m != 0 { s as f32 } else { 0.0 })
            .collect();
        DcbContainer::new(self.dims, 0.0, vec![[0.0; 3]], data)
    }

    fn check(&self) -> Result<()> {
        if self.scores.len() != self.mask.data.len() || self.dims != self.mask.dims {
            return Err(Error::Shape("PSIC scores and mask disagree".into()));
        }
        if let Some(s) = self
            .scores
            .iter()
            .zip(&self.mask.data)
            .find(|(s, &m)| m != 0 && !(0.0..=1.0).contains(*s))
        {
            return Err(Error::Domain {
                what: "PSIC score",
                value: *s.0,
            });
        }
        Ok(())
    }
}

/// Binary PGM of axial slice `z`: width N1, height N2, pixel
/// `round(255·score)` inside the mask and 0 outside.
pub fn pgm_bytes(map: &PsicMap, z: usize) -> Vec<u8> {
    let [n1, n2, _] = map.dims;
    let mut out = format!("P5\n{n1} {n2}\n255\n").into_bytes();
    for y in 0..n2 {
        for x in 0..n1 {
            let i = map.index(x, y, z);
            let px = if map.mask.data[i] != 0 {
                (map.scores[i].clamp(0.0, 1.0) * 255.0).round() as u8
            } else {
                0
            };
            out.push(px);
        }
    }
    out
}

/// Writes the container to `out` and one `<stem>_zNNN.pgm` per axial slice
/// that intersects the mask. Returns the slice paths.
pub fn export_psic(map: &PsicMap, out: &Path) -> Result<Vec<PathBuf>> {
    map.check()?;
    let container = map.to_container()?;
    let [n1, n2, n3] = map.dims;
    let stem = out
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "psic".into());
    let slices: Vec<usize> = (0..n3)
        .filter(|&z| (0..n1).any(|x| (0..n2).any(|y| map.mask.contains(x, y, z))))
        .collect();
    container.write(out)?;
    let mut paths = Vec::with_capacity(slices.len());
    for z in slices {
        let p = out.with_file_name(format!("{stem}_z{z:03}.pgm"));
        super::write_atomic(&p, &pgm_bytes(map, z))?;
        paths.push(p);
    }
    Ok(paths)
}
