//! Synthetic two-class diffusion cohorts.
//!
//! Each ROI voxel holds a mixture of prolate tensors whose diffusivities,
//! fractions and in-plane orientation vary smoothly in space (Gaussian
//! filtered white noise) and per subject. Voxels outside every ROI hold
//! class-independent isotropic tissue. Signals are rendered on a
//! repulsion-optimised scheme, corrupted by Rician noise and stored as f32.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{label_name, CohortManifest, DcbContainer, ManifestEntry, RoiMask, Subject};
use crate::rng;
use crate::sh::GradientScheme;

const TAG_SCHEME: u64 = 0x5c4e;
const TAG_SUBJECT: u64 = 0x5b1e;
const TAG_FIELD: u64 = 0xf1e1;
const TAG_NOISE: u64 = 0x4015;

pub type Tensor = [[f64; 3]; 3];

/// Volume-weighted sum of tensor compartments.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorMixture {
    compartments: Vec<(f64, Tensor)>,
}

impl TensorMixture {
    pub fn new(compartments: Vec<(f64, Tensor)>) -> Result<Self> {
        if compartments.is_empty() {
            return Err(Error::Empty("mixture compartments"));
        }
        let total: f64 = compartments.iter().map(|c| c.0).sum();
        if (total - 1.0).abs() > 1e-9 || compartments.iter().any(|c| !(0.0..=1.0).contains(&c.0)) {
            return Err(Error::Config(format!("volume fractions must lie in [0, 1] and sum to 1, got {total}")));
        }
        for (_, d) in &compartments {
            let sym = (0..3).all(|i| (0..3).all(|j| (d[i][j] - d[j][i]).abs() <= 1e-15 * (1.0 + d[i][j].abs())));
            if !sym {
                return Err(Error::Config("compartment tensor is not symmetric".into()));
            }
            let m = nalgebra::Matrix3::from_fn(|i, j| d[i][j]);
            let min = m.symmetric_eigenvalues().min();
            if min < -1e-15 * m.norm() {
                return Err(Error::Config(format!("compartment tensor has negative eigenvalue {min}")));
            }
        }
        Ok(Self { compartments })
    }

    pub fn isotropic(d: f64) -> Self {
        Self {
            compartments: vec![(1.0, [[d, 0.0, 0.0], [0.0, d, 0.0], [0.0, 0.0, d]])],
        }
    }

    pub fn compartments(&self) -> &[(f64, Tensor)] {
        &self.compartments
    }
}

/// `λ∥·aaᵀ + λ⊥·(I − aaᵀ)` for unit axis `a`.
pub fn prolate_tensor(axis: [f64; 3], axial: f64, radial: f64) -> Tensor {
    let n = (axis[0] * axis[0] + axis[1] * axis[1] + axis[2] * axis[2]).sqrt();
    let a = axis.map(|c| c / n);
    let mut d = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            let id = if i == j { 1.0 } else { 0.0 };
            d[i][j] = radial * id + (axial - radial) * a[i] * a[j];
        }
    }
    d
}

fn quad(d: &Tensor, u: [f64; 3]) -> f64 {
    (0..3).map(|i| (0..3).map(|j| u[i] * d[i][j] * u[j]).sum::<f64>()).sum()
}

/// `s(u) = Σ fᵢ exp(−b uᵀDᵢu)` on every direction of the scheme.
pub fn multi_tensor_signal(mix: &TensorMixture, scheme: &GradientScheme) -> Vec<f64> {
    let b = scheme.b_value();
    scheme
        .directions()
        .iter()
        .map(|&u| mix.compartments.iter().map(|(f, d)| f * (-b * quad(d, u)).exp()).sum())
        .collect()
}

/// Magnitude of the signal plus complex Gaussian noise with σ = 1/snr.
/// An infinite `snr` returns the input unchanged.
pub fn rician_noise<R: Rng + ?Sized>(signal: &[f64], snr: f64, rng: &mut R) -> Result<Vec<f64>> {
    if !(snr > 0.0) {
        return Err(Error::Domain { what: "SNR", value: snr });
    }
    if snr.is_infinite() {
        return Ok(signal.to_vec());
    }
    let sigma = 1.0 / snr;
    Ok(signal
        .iter()
        .map(|&s| {
            let n1: f64 = StandardNormal.sample(rng);
            let n2: f64 = StandardNormal.sample(rng);
            ((s + sigma * n1).powi(2) + (sigma * n2).powi(2)).sqrt()
        })
        .collect())
}

/// `K` directions minimising the antipodally symmetric Coulomb energy
/// `Σ 1/|uᵢ−uⱼ| + 1/|uᵢ+uⱼ|`, returned on the upper hemisphere.
pub fn make_scheme(k: usize, b_value: f64, seed: u64) -> Result<GradientScheme> {
    if k < 6 {
        return Err(Error::InvalidScheme(format!("need at least 6 directions, got {k}")));
    }
    let mut rng = rng::stream(seed, &[TAG_SCHEME, k as u64]);
    let mut pts: Vec<[f64; 3]> = (0..k)
        .map(|_| loop {
            let v: [f64; 3] = [StandardNormal.sample(&mut rng), StandardNormal.sample(&mut rng), StandardNormal.sample(&mut rng)];
            let n = norm(v);
            if n > 1e-3 {
                break v.map(|c| c / n);
            }
        })
        .collect();
    let mut step = 0.1;
    let mut energy = coulomb_energy(&pts);
    for _ in 0..2000 {
        let forces = coulomb_forces(&pts);
        let trial: Vec<[f64; 3]> = pts
            .iter()
            .zip(&forces)
            .map(|(p, f)| {
                let q = [p[0] + step * f[0], p[1] + step * f[1], p[2] + step * f[2]];
                let n = norm(q);
                q.map(|c| c / n)
            })
            .collect();
        let e = coulomb_energy(&trial);
        if e < energy {
            pts = trial;
            energy = e;
            step *= 1.1;
        } else {
            step *= 0.5;
            if step < 1e-12 {
                break;
            }
        }
    }
    for p in &mut pts {
        if p[2] < 0.0 || (p[2] == 0.0 && p[1] < 0.0) {
            *p = p.map(|c| -c);
        }
    }
    GradientScheme::from_unnormalized(pts, b_value)
}

fn norm(v: [f64; 3]) -> f64 {
    (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()
}

fn coulomb_energy(pts: &[[f64; 3]]) -> f64 {
    let mut e = 0.0;
    for i in 0..pts.len() {
        for j in i + 1..pts.len() {
            let (a, b) = (pts[i], pts[j]);
            e += 1.0 / norm([a[0] - b[0], a[1] - b[1], a[2] - b[2]]);
            e += 1.0 / norm([a[0] + b[0], a[1] + b[1], a[2] + b[2]]);
        }
    }
    e
}

/// Tangential components of the repulsive forces.
fn coulomb_forces(pts: &[[f64; 3]]) -> Vec<[f64; 3]> {
    pts.iter()
        .enumerate()
        .map(|(i, a)| {
            let mut f = [0.0; 3];
            for (j, b) in pts.iter().enumerate() {
                if i == j {
                    continue;
                }
                for sign in [-1.0, 1.0] {
                    let d = [a[0] + sign * b[0], a[1] + sign * b[1], a[2] + sign * b[2]];
                    let r = norm(d);
                    let r3 = r * r * r;
                    for c in 0..3 {
                        f[c] += d[c] / r3;
                    }
                }
            }
            let radial = f[0] * a[0] + f[1] * a[1] + f[2] * a[2];
            [f[0] - radial * a[0], f[1] - radial * a[1], f[2] - radial * a[2]]
        })
        .collect()
}

/// Half-open box `[lo, hi)` of voxels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RoiBox {
    pub name: String,
    pub lo: [usize; 3],
    pub hi: [usize; 3],
}

impl RoiBox {
    pub fn contains(&self, x: usize, y: usize, z: usize) -> bool {
        let p = [x, y, z];
        (0..3).all(|a| self.lo[a] <= p[a] && p[a] < self.hi[a])
    }
}

/// Microstructure of one class inside the ROIs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassParams {
    /// mm²/s.
    pub axial: f64,
    pub radial: f64,
    /// Fibre axes before the spatial rotation about z.
    pub fibers: Vec<[f64; 3]>,
    /// Volume fraction of the first fibre; the rest share `1 − fraction`.
    pub fraction: f64,
    /// Std of the additive spatial perturbation of `fraction`.
    pub fraction_jitter: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhantomSpec {
    pub dims: [usize; 3],
    pub rois: Vec<RoiBox>,
    pub n_per_class: usize,
    pub k: usize,
    pub b_value: f64,
    /// `None` means noiseless.
    pub snr: Option<f64>,
    pub cn: ClassParams,
    pub ad: ClassParams,
    /// Relative std of per-subject diffusivity scaling.
    pub subject_jitter: f64,
    /// Relative std of per-voxel diffusivity scaling.
    pub voxel_jitter: f64,
    /// Std of the in-plane fibre rotation about z, degrees.
    pub orientation_jitter_deg: f64,
    pub background_diffusivity: f64,
    /// Gaussian smoothing of the noise fields, voxels.
    pub smoothing_sigma: f64,
    pub seed: u64,
}

impl PhantomSpec {
    /// Single fibre along x; AD has higher radial diffusivity.
    pub fn scenario_a() -> Self {
        let cn = ClassParams {
            axial: 1.7e-3,
            radial: 0.30e-3,
            fibers: vec![[1.0, 0.0, 0.0]],
            fraction: 1.0,
            fraction_jitter: 0.0,
        };
        let ad = ClassParams {
            radial: 0.45e-3,
            ..cn.clone()
        };
        Self {
            dims: [10, 10, 10],
            rois: vec![RoiBox {
                name: "wm".into(),
                lo: [2, 2, 2],
                hi: [8, 8, 8],
            }],
            n_per_class: 20,
            k: 41,
            b_value: 1000.0,
            snr: Some(30.0),
            cn,
            ad,
            subject_jitter: 0.02,
            voxel_jitter: 0.03,
            orientation_jitter_deg: 10.0,
            background_diffusivity: 0.8e-3,
            smoothing_sigma: 2.0,
            seed: 1,
        }
    }

    /// Equal-fraction 90° crossings with identical diffusivities; the
    /// second fibre lies along y for CN and along z for AD. Every
    /// rotation-invariant single-tensor quantity has the same distribution.
    pub fn scenario_b() -> Self {
        let cn = ClassParams {
            axial: 1.7e-3,
            radial: 0.30e-3,
            fibers: vec![[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]],
            fraction: 0.5,
            fraction_jitter: 0.05,
        };
        let ad = ClassParams {
            fibers: vec![[1.0, 0.0, 0.0], [0.0, 0.0, 1.0]],
            ..cn.clone()
        };
        Self {
            cn,
            ad,
            seed: 2,
            ..Self::scenario_a()
        }
    }

    /// Both classes share the CN parameters of scenario (a).
    pub fn null() -> Self {
        let a = Self::scenario_a();
        Self {
            ad: a.cn.clone(),
            seed: 3,
            ..a
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k < 7 {
            return Err(Error::Config(format!("K must be at least 7, got {}", self.k)));
        }
        if let Some(snr) = self.snr {
            if !(snr > 0.0) {
                return Err(Error::Config(format!("SNR must be positive, got {snr}")));
            }
        }
        if self.n_per_class == 0 || self.dims.iter().any(|&d| d == 0) {
            return Err(Error::Config("empty cohort or grid".into()));
        }
        if !(self.b_value > 0.0) || !(self.smoothing_sigma >= 0.0) {
            return Err(Error::Config("b-value must be positive and sigma nonnegative".into()));
        }
        for r in &self.rois {
            if (0..3).any(|a| r.lo[a] >= r.hi[a] || r.hi[a] > self.dims[a]) {
                return Err(Error::Config(format!("ROI {} is empty or leaves the grid", r.name)));
            }
        }
        for c in [&self.cn, &self.ad] {
            if c.fibers.is_empty() || !(c.axial >= c.radial && c.radial > 0.0) {
                return Err(Error::Config("fibres need axial ≥ radial > 0".into()));
            }
            if !(0.0..=1.0).contains(&c.fraction) || (c.fibers.len() == 1 && c.fraction != 1.0) {
                return Err(Error::Config(format!("invalid first-fibre fraction {}", c.fraction)));
            }
        }
        Ok(())
    }

    fn class(&self, label: u8) -> &ClassParams {
        if label == 1 {
            &self.ad
        } else {
            &self.cn
        }
    }
}

#[derive(Debug, Clone)]
pub struct Cohort {
    pub spec: PhantomSpec,
    pub scheme: GradientScheme,
    pub subjects: Vec<Subject>,
}

/// Unit-variance Gaussian-filtered white noise on the grid.
pub fn smooth_field<R: Rng + ?Sized>(dims: [usize; 3], sigma: f64, rng: &mut R) -> Vec<f64> {
    let n: usize = dims.iter().product();
    let mut f: Vec<f64> = (0..n).map(|_| StandardNormal.sample(rng)).collect();
    if sigma > 0.0 {
        let radius = (3.0 * sigma).ceil() as i64;
        let kernel: Vec<f64> = (-radius..=radius).map(|t| (-(t * t) as f64 / (2.0 * sigma * sigma)).exp()).collect();
        let strides = [dims[1] * dims[2], dims[2], 1];
        for axis in 0..3 {
            let len = dims[axis] as i64;
            let mut out = vec![0.0; n];
            for (i, o) in out.iter_mut().enumerate() {
                let pos = (i / strides[axis] % dims[axis]) as i64;
                let base = i - pos as usize * strides[axis];
                let (mut acc, mut wsum) = (0.0, 0.0);
                for (t, w) in (-radius..=radius).zip(&kernel) {
                    let q = pos + t;
                    if (0..len).contains(&q) {
                        acc += w * f[base + q as usize * strides[axis]];
                        wsum += w;
                    }
                }
                *o = acc / wsum;
            }
            f = out;
        }
    }
    let mean = f.iter().sum::<f64>() / n as f64;
    let var = f.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
    let sd = var.sqrt();
    f.iter().map(|v| if sd > 0.0 { (v - mean) / sd } else { 0.0 }).collect()
}

fn rotate_z(v: [f64; 3], angle: f64) -> [f64; 3] {
    let (s, c) = angle.sin_cos();
    [c * v[0] - s * v[1], s * v[0] + c * v[1], v[2]]
}

/// Noise-free ROI mixture for one voxel.
fn roi_mixture(p: &ClassParams, scale_axial: f64, scale_radial: f64, dfrac: f64, angle: f64) -> Result<TensorMixture> {
    let axial = p.axial * scale_axial;
    let radial = (p.radial * scale_radial).min(axial);
    let nf = p.fibers.len();
    let first = if nf == 1 { 1.0 } else { (p.fraction + dfrac).clamp(0.05, 0.95) };
    let rest = if nf == 1 { 0.0 } else { (1.0 - first) / (nf - 1) as f64 };
    let comps = p
        .fibers
        .iter()
        .enumerate()
        .map(|(i, &a)| {
            let f = if i == 0 { first } else { rest };
            (f, prolate_tensor(rotate_z(a, angle), axial, radial))
        })
        .collect();
    TensorMixture::new(comps)
}

fn gen_subject(spec: &PhantomSpec, scheme: &GradientScheme, label: u8, index: usize) -> Result<Subject> {
    let p = spec.class(label);
    let path = [TAG_SUBJECT, u64::from(label), index as u64];
    let mut srng = rng::stream(spec.seed, &path);
    let g_axial: f64 = StandardNormal.sample(&mut srng);
    let g_radial: f64 = StandardNormal.sample(&mut srng);
    let field = |which: u64| {
        let mut r = rng::stream(spec.seed, &[TAG_FIELD, u64::from(label), index as u64, which]);
        smooth_field(spec.dims, spec.smoothing_sigma, &mut r)
    };
    let (f_axial, f_radial, f_frac, f_angle) = (field(0), field(1), field(2), field(3));
    let mut noise = rng::stream(spec.seed, &[TAG_NOISE, u64::from(label), index as u64]);
    let background = multi_tensor_signal(&TensorMixture::isotropic(spec.background_diffusivity), scheme);

    let [n1, n2, n3] = spec.dims;
    let k = scheme.len();
    let mut data = Vec::with_capacity(n1 * n2 * n3 * k);
    let mut i = 0;
    for x in 0..n1 {
        for y in 0..n2 {
            for z in 0..n3 {
                let clean = if spec.rois.iter().any(|r| r.contains(x, y, z)) {
                    let mix = roi_mixture(
                        p,
                        1.0 + spec.subject_jitter * g_axial + spec.voxel_jitter * f_axial[i],
                        1.0 + spec.subject_jitter * g_radial + spec.voxel_jitter * f_radial[i],
                        p.fraction_jitter * f_frac[i],
                        spec.orientation_jitter_deg.to_radians() * f_angle[i],
                    )?;
                    multi_tensor_signal(&mix, scheme)
                } else {
                    background.clone()
                };
                let noisy = rician_noise(&clean, spec.snr.unwrap_or(f64::INFINITY), &mut noise)?;
                data.extend(noisy.into_iter().map(|v| v as f32));
                i += 1;
            }
        }
    }
    let volume = DcbContainer::new(spec.dims, spec.b_value, scheme.directions().to_vec(), data)?;
    let rois = spec
        .rois
        .iter()
        .map(|r| (r.name.clone(), RoiMask::from_fn(spec.dims, |x, y, z| r.contains(x, y, z))))
        .collect();
    Ok(Subject {
        id: format!("{}{:02}", label_name(label).to_lowercase(), index + 1),
        label,
        volume,
        rois,
    })
}

/// Generates every subject in memory; CN subjects first.
pub fn gen_cohort(spec: &PhantomSpec) -> Result<Cohort> {
    spec.validate()?;
    let scheme = make_scheme(spec.k, spec.b_value, spec.seed)?;
    let jobs: Vec<(u8, usize)> = [0u8, 1]
        .iter()
        .flat_map(|&l| (0..spec.n_per_class).map(move |i| (l, i)))
        .collect();
    let subjects = jobs
        .par_iter()
        .map(|&(l, i)| gen_subject(spec, &scheme, l, i))
        .collect::<Result<Vec<_>>>()?;
    Ok(Cohort {
        spec: spec.clone(),
        scheme,
        subjects,
    })
}

/// Writes volumes, masks and `manifest.json` under `dir`.
pub fn write_cohort(cohort: &Cohort, dir: &Path) -> Result<PathBuf> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let entries = cohort
        .subjects
        .par_iter()
        .map(|s| {
            let volume = PathBuf::from(format!("{}.dcb", s.id));
            s.volume.write(&dir.join(&volume))?;
            let mut rois = BTreeMap::new();
            for (name, mask) in &s.rois {
                let p = PathBuf::from(format!("{}_{name}.dcb", s.id));
                mask.write(&dir.join(&p))?;
                rois.insert(name.clone(), p);
            }
            Ok(ManifestEntry {
                id: s.id.clone(),
                label: label_name(s.label).into(),
                volume,
                rois,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let manifest = CohortManifest {
        subjects: entries,
        provenance: serde_json::json!({
            "generator": "psic phantom",
            "version": env!("CARGO_PKG_VERSION"),
            "spec": cohort.spec,
        }),
    };
    let path = dir.join("manifest.json");
    manifest.write(&path)?;
    Ok(path)
}
