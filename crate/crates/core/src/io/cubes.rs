//! Diffusion-cube extraction and conversion to SH cubes.

use rayon::prelude::*;

use super::{DcbContainer, RoiMask};
use crate::error::{Error, Result};
use crate::sh::{num_coeffs, GradientScheme, ShCube, ShFitter};

/// An `M×M×M×K` block of raw signals centred on `center`, channel fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionCube {
    pub center: [usize; 3],
    pub radius: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl DiffusionCube {
    pub fn side(&self) -> usize {
        2 * self.radius + 1
    }

    pub fn site(&self, x: usize, y: usize, z: usize) -> &[f64] {
        let m = self.side();
        let o = ((x * m + y) * m + z) * self.channels;
        &self.data[o..o + self.channels]
    }
}

fn check_dims(volume: [usize; 3], mask: [usize; 3], radius: usize) -> Result<()> {
    if volume != mask {
        return Err(Error::Shape(format!("volume dims {volume:?} differ from mask dims {mask:?}")));
    }
    let m = 2 * radius + 1;
    if volume.iter().any(|&d| d < m) {
        return Err(Error::Shape(format!("radius {radius} needs at least {m} voxels per axis, volume is {volume:?}")));
    }
    Ok(())
}

/// Centres whose whole `(2L+1)³` neighbourhood lies inside the mask,
/// in lexicographic order.
pub fn interior_voxels(mask: &RoiMask, radius: usize) -> Vec<[usize; 3]> {
    let [n1, n2, n3] = mask.dims;
    let r = radius;
    let mut out = Vec::new();
    if n1 < 2 * r + 1 || n2 < 2 * r + 1 || n3 < 2 * r + 1 {
        return out;
    }
    for x in r..n1 - r {
        for y in r..n2 - r {
            for z in r..n3 - r {
                let inside = (x - r..=x + r)
                    .all(|a| (y - r..=y + r).all(|b| (z - r..=z + r).all(|c| mask.contains(a, b, c))));
                if inside {
                    out.push([x, y, z]);
                }
            }
        }
    }
    out
}

pub fn extract_dcs(volume: &DcbContainer, mask: &RoiMask, radius: usize) -> Result<Vec<DiffusionCube>> {
    check_dims(volume.dims, mask.dims, radius)?;
    let k = volume.channels();
    let m = 2 * radius + 1;
    Ok(interior_voxels(mask, radius)
        .into_iter()
        .map(|c| {
            let mut data = Vec::with_capacity(m * m * m * k);
            for x in c[0] - radius..=c[0] + radius {
                for y in c[1] - radius..=c[1] + radius {
                    for z in c[2] - radius..=c[2] + radius {
                        data.extend(volume.voxel(x, y, z).iter().map(|&v| f64::from(v)));
                    }
                }
            }
            DiffusionCube {
                center: c,
                radius,
                channels: k,
                data,
            }
        })
        .collect())
}

/// Fits SH coefficients at every site of every cube.
pub fn dcs_to_sh(cubes: &[DiffusionCube], scheme: &GradientScheme, n_max: usize, reg: f64) -> Result<Vec<ShCube>> {
    let fitter = ShFitter::new(scheme, n_max, reg)?;
    let p = num_coeffs(n_max)?;
    if let Some(c) = cubes.iter().find(|c| c.channels != scheme.len()) {
        return Err(Error::Shape(format!("cube has {} channels, scheme has {}", c.channels, scheme.len())));
    }
    cubes
        .par_iter()
        .map(|c| {
            let mut data = vec![0.0; c.data.len() / c.channels * p];
            for (src, dst) in c.data.chunks_exact(c.channels).zip(data.chunks_exact_mut(p)) {
                fitter.fit_into(src, dst);
            }
            ShCube::new(c.radius, n_max, data)
        })
        .collect()
}

/// SH coefficients for every voxel of a volume, channel fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct ShVolume {
    pub dims: [usize; 3],
    pub n_max: usize,
    pub data: Vec<f64>,
}

impl ShVolume {
    pub fn channels(&self) -> usize {
        (self.n_max + 1) * (self.n_max + 2) / 2
    }

    pub fn voxel(&self, x: usize, y: usize, z: usize) -> &[f64] {
        let p = self.channels();
        let o = ((x * self.dims[1] + y) * self.dims[2] + z) * p;
        &self.data[o..o + p]
    }

    /// The coefficient volume as a container with `K = P`; the gradient
    /// table is zero and the b-value is 0.
    pub fn to_container(&self) -> Result<DcbContainer> {
        let p = self.channels();
        DcbContainer::new(
            self.dims,
            0.0,
            vec![[0.0; 3]; p],
            self.data.iter().map(|&v| v as f32).collect(),
        )
    }
}

/// Fits each voxel once. Cheaper than [`dcs_to_sh`] when cubes overlap.
pub fn fit_volume_sh(volume: &DcbContainer, n_max: usize, reg: f64) -> Result<ShVolume> {
    let scheme = volume.scheme()?;
    let fitter = ShFitter::new(&scheme, n_max, reg)?;
    let p = num_coeffs(n_max)?;
    let k = volume.channels();
    let mut data = vec![0.0; volume.voxels() * p];
    data.par_chunks_mut(p)
        .zip(volume.data.par_chunks(k))
        .for_each_init(
            || vec![0.0; k],
            |buf, (dst, src)| {
                buf.iter_mut().zip(src).for_each(|(b, &s)| *b = f64::from(s));
                fitter.fit_into(buf, dst);
            },
        );
    Ok(ShVolume {
        dims: volume.dims,
        n_max,
        data,
    })
}

/// Cuts SH cubes around `centers` out of a fitted volume.
pub fn assemble_sh_cubes(vol: &ShVolume, centers: &[[usize; 3]], radius: usize) -> Result<Vec<ShCube>> {
    let p = vol.channels();
    let m = 2 * radius + 1;
    centers
        .iter()
        .map(|c| {
            if (0..3).any(|a| c[a] < radius || c[a] + radius >= vol.dims[a]) {
                return Err(Error::Shape(format!("cube at {c:?} with radius {radius} leaves the volume")));
            }
            let mut data = Vec::with_capacity(m * m * m * p);
            for x in c[0] - radius..=c[0] + radius {
                for y in c[1] - radius..=c[1] + radius {
                    for z in c[2] - radius..=c[2] + radius {
                        data.extend_from_slice(vol.voxel(x, y, z));
                    }
                }
            }
            ShCube::new(radius, vol.n_max, data)
        })
        .collect()
}
