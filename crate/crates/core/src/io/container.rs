//! The DCB container.
//!
//! ```text
//! offset  size      field
//! 0       4         magic "DCB1"
//! 4       2         version (u16, currently 1)
//! 6       12        dims N1 N2 N3 (3 × u32)
//! 18      4         K (u32)
//! 22      8         b-value (f64)
//! 30      24·K      gradient table, K rows of (x, y, z) f64
//! 30+24K  ...       payload
//! ```
//!
//! All integers and floats are little-endian. Volume payloads are
//! `N1·N2·N3·K` f32 values ordered `[x][y][z][k]` (channel fastest). ROI
//! masks use the same header with `K = 1` and one byte per voxel.

use std::path::Path;

use crate::error::{Error, Result};
use crate::sh::GradientScheme;

pub const MAGIC: &[u8; 4] = b"DCB1";
pub const VERSION: u16 = 1;

/// A 4-D `N1×N2×N3×K` array of normalised diffusion signals.
#[derive(Debug, Clone, PartialEq)]
pub struct DcbContainer {
    pub dims: [usize; 3],
    pub b_value: f64,
    pub gradients: Vec<[f64; 3]>,
    pub data: Vec<f32>,
}

impl DcbContainer {
    pub fn new(dims: [usize; 3], b_value: f64, gradients: Vec<[f64; 3]>, data: Vec<f32>) -> Result<Self> {
        let want = dims.iter().product::<usize>() * gradients.len();
        if gradients.is_empty() || data.len() != want {
            return Err(Error::Shape(format!(
                "container with dims {dims:?} and K = {} needs {want} values, got {}",
                gradients.len(),
                data.len()
            )));
        }
        Ok(Self {
            dims,
            b_value,
            gradients,
            data,
        })
    }

    pub fn channels(&self) -> usize {
        self.gradients.len()
    }

    pub fn voxels(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        (x * self.dims[1] + y) * self.dims[2] + z
    }

    /// The K samples of one voxel.
    pub fn voxel(&self, x: usize, y: usize, z: usize) -> &[f32] {
        let k = self.channels();
        let o = self.index(x, y, z) * k;
        &self.data[o..o + k]
    }

    pub fn scheme(&self) -> Result<GradientScheme> {
        GradientScheme::new(self.gradients.clone(), self.b_value)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = header(self.dims, self.b_value, &self.gradients);
        out.reserve(self.data.len() * 4);
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let (h, payload) = parse_header(bytes, path)?;
        let want = h.dims.iter().product::<usize>() * h.gradients.len() * 4;
        if payload.len() != want {
            return Err(Error::format(path, format!("payload has {} bytes, header implies {want}", payload.len())));
        }
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Ok(Self {
            dims: h.dims,
            b_value: h.b_value,
            gradients: h.gradients,
            data,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        super::write_atomic(path, &self.to_bytes())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_bytes(&super::read_file(path)?, path)
    }
}

/// Binary ROI mask; nonzero bytes are inside the region.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RoiMask {
    pub dims: [usize; 3],
    pub data: Vec<u8>,
}

impl RoiMask {
    pub fn new(dims: [usize; 3], data: Vec<u8>) -> Result<Self> {
        if data.len() != dims.iter().product::<usize>() {
            return Err(Error::Shape(format!("mask with dims {dims:?} has {} bytes", data.len())));
        }
        Ok(Self { dims, data })
    }

    pub fn from_fn(dims: [usize; 3], f: impl Fn(usize, usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(dims.iter().product());
        for x in 0..dims[0] {
            for y in 0..dims[1] {
                for z in 0..dims[2] {
                    data.push(u8::from(f(x, y, z)));
                }
            }
        }
        Self { dims, data }
    }

    pub fn contains(&self, x: usize, y: usize, z: usize) -> bool {
        self.data[(x * self.dims[1] + y) * self.dims[2] + z] != 0
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0).count()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = header(self.dims, 0.0, &[[0.0; 3]]);
        out.extend_from_slice(&self.data);
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let (h, payload) = parse_header(bytes, path)?;
        if h.gradients.len() != 1 {
            return Err(Error::format(path, format!("mask must have K = 1, got {}", h.gradients.len())));
        }
        let want = h.dims.iter().product::<usize>();
        if payload.len() != want {
            return Err(Error::format(path, format!("mask payload has {} bytes, expected {want}", payload.len())));
        }
        Ok(Self {
            dims: h.dims,
            data: payload.to_vec(),
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        super::write_atomic(path, &self.to_bytes())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_bytes(&super::read_file(path)?, path)
    }
}

struct Header {
    dims: [usize; 3],
    b_value: f64,
    gradients: Vec<[f64; 3]>,
}

fn header(dims: [usize; 3], b_value: f64, gradients: &[[f64; 3]]) -> Vec<u8> {
    let mut out = Vec::with_capacity(30 + 24 * gradients.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    for d in dims {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    out.extend_from_slice(&(gradients.len() as u32).to_le_bytes());
    out.extend_from_slice(&b_value.to_le_bytes());
    for g in gradients {
        for c in g {
            out.extend_from_slice(&c.to_le_bytes());
        }
    }
    out
}

fn parse_header<'a>(bytes: &'a [u8], path: &Path) -> Result<(Header, &'a [u8])> {
    if bytes.len() < 30 {
        return Err(Error::format(path, "truncated header"));
    }
    if &bytes[..4] != MAGIC {
        return Err(Error::format(path, "bad magic, expected DCB1"));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != VERSION {
        return Err(Error::format(path, format!("unsupported version {version}")));
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes")) as usize;
    let f64_at = |o: usize| f64::from_le_bytes(bytes[o..o + 8].try_into().expect("8 bytes"));
    let dims = [u32_at(6), u32_at(10), u32_at(14)];
    let k = u32_at(18);
    let b_value = f64_at(22);
    let end = 30 + 24 * k;
    if bytes.len() < end {
        return Err(Error::format(path, "truncated gradient table"));
    }
    let gradients = (0..k)
        .map(|i| {
            let o = 30 + 24 * i;
            [f64_at(o), f64_at(o + 8), f64_at(o + 16)]
        })
        .collect();
    Ok((
        Header {
            dims,
            b_value,
            gradients,
        },
        &bytes[end..],
    ))
}
