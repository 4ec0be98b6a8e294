//! Real, symmetric spherical harmonics over even degrees.
//!
//! Basis convention: the modified real basis built from the real and
//! imaginary parts of the complex harmonics,
//!
//! ```text
//! Y_{n,l} = √2 · N(n,|l|) P_n^{|l|}(cos θ) cos(|l| φ)   l < 0
//! Y_{n,0} =      N(n,0)   P_n^0(cos θ)
//! Y_{n,l} = √2 · N(n,l)   P_n^l(cos θ)   sin(l φ)       l > 0
//! ```
//!
//! with `N(n,m)² = (2n+1)/(4π) · (n−m)!/(n+m)!` and associated Legendre
//! functions without the Condon–Shortley phase. Only even `n` enter, so every
//! basis function is antipodally symmetric. The basis is orthonormal on S².
//!
//! Coefficients are stored lexicographically: degree ascending over even
//! values, order `l = −n..=n` inside each degree.

use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// Number of coefficients of an even-degree expansion up to `n_max`.
pub fn num_coeffs(n_max: usize) -> Result<usize> {
    if n_max % 2 != 0 {
        return Err(Error::OddDegree(n_max));
    }
    Ok((n_max + 1) * (n_max + 2) / 2)
}

/// Flat index of `(n, l)`; `n` must be even and `|l| ≤ n`.
pub fn coeff_index(n: usize, l: i64) -> usize {
    debug_assert!(n % 2 == 0 && l.unsigned_abs() as usize <= n);
    n * n.saturating_sub(1) / 2 + (l + n as i64) as usize
}

/// Inverse of [`coeff_index`].
pub fn degree_order(j: usize) -> (usize, i64) {
    let mut n = 0;
    loop {
        let start = coeff_index(n, -(n as i64));
        if j < start + 2 * n + 1 {
            return (n, j as i64 - start as i64 - n as i64);
        }
        n += 2;
    }
}

/// Degree of every coefficient slot, in storage order.
pub fn degrees(n_max: usize) -> Vec<usize> {
    (0..=n_max)
        .step_by(2)
        .flat_map(|n| std::iter::repeat_n(n, 2 * n + 1))
        .collect()
}

/// Legendre polynomial `p_n(t)` by the three-term recurrence.
pub fn legendre_poly(n: usize, t: f64) -> Result<f64> {
    if !(-1.0..=1.0).contains(&t) {
        return Err(Error::Domain {
            what: "legendre_poly",
            value: t,
        });
    }
    Ok(legendre_unchecked(n, t))
}

pub(crate) fn legendre_unchecked(n: usize, t: f64) -> f64 {
    let (mut prev, mut cur) = (1.0, t);
    if n == 0 {
        return prev;
    }
    for k in 1..n {
        let k = k as f64;
        let next = ((2.0 * k + 1.0) * t * cur - k * prev) / (k + 1.0);
        prev = cur;
        cur = next;
    }
    cur
}

/// Associated Legendre functions `P_n^m(x)` for `0 ≤ m ≤ n ≤ n_max`,
/// without Condon–Shortley phase. Entry `n(n+1)/2 + m`.
fn assoc_legendre_table(n_max: usize, x: f64) -> Vec<f64> {
    let idx = |n: usize, m: usize| n * (n + 1) / 2 + m;
    let mut p = vec![0.0; (n_max + 1) * (n_max + 2) / 2];
    let s = (1.0 - x * x).max(0.0).sqrt();
    let mut pmm = 1.0;
    for m in 0..=n_max {
        if m > 0 {
            pmm *= (2 * m - 1) as f64 * s;
        }
        p[idx(m, m)] = pmm;
        if m < n_max {
            p[idx(m + 1, m)] = x * (2 * m + 1) as f64 * pmm;
        }
        for n in (m + 2)..=n_max {
            p[idx(n, m)] = ((2 * n - 1) as f64 * x * p[idx(n - 1, m)]
                - (n + m - 1) as f64 * p[idx(n - 2, m)])
                / (n - m) as f64;
        }
    }
    p
}

/// `N(n, m)` computed in log space.
fn normalization(n: usize, m: usize) -> f64 {
    let log_ratio = libm::lgamma((n - m + 1) as f64) - libm::lgamma((n + m + 1) as f64);
    (0.5 * (((2 * n + 1) as f64).ln() - (4.0 * std::f64::consts::PI).ln() + log_ratio)).exp()
}

/// One row of the design matrix: all basis functions at unit vector `u`.
pub fn basis_row(u: [f64; 3], n_max: usize) -> Vec<f64> {
    let [x, y, z] = u;
    let cos_theta = z.clamp(-1.0, 1.0);
    let phi = y.atan2(x);
    let table = assoc_legendre_table(n_max, cos_theta);
    let mut row = Vec::with_capacity((n_max + 1) * (n_max + 2) / 2);
    for n in (0..=n_max).step_by(2) {
        for l in -(n as i64)..=(n as i64) {
            let m = l.unsigned_abs() as usize;
            let base = normalization(n, m) * table[n * (n + 1) / 2 + m];
            let v = match l.cmp(&0) {
                std::cmp::Ordering::Less => std::f64::consts::SQRT_2 * base * (m as f64 * phi).cos(),
                std::cmp::Ordering::Equal => base,
                std::cmp::Ordering::Greater => std::f64::consts::SQRT_2 * base * (m as f64 * phi).sin(),
            };
            row.push(v);
        }
    }
    row
}

/// K diffusion-encoding directions on the unit sphere and their b-value.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientScheme {
    directions: Vec<[f64; 3]>,
    b_value: f64,
}

impl GradientScheme {
    pub fn new(directions: Vec<[f64; 3]>, b_value: f64) -> Result<Self> {
        if directions.is_empty() {
            return Err(Error::InvalidScheme("no directions".into()));
        }
        if !(b_value > 0.0) || !b_value.is_finite() {
            return Err(Error::InvalidScheme(format!("b-value must be positive, got {b_value}")));
        }
        for (k, u) in directions.iter().enumerate() {
            let norm = (u[0] * u[0] + u[1] * u[1] + u[2] * u[2]).sqrt();
            if (norm - 1.0).abs() > 1e-12 {
                return Err(Error::InvalidScheme(format!(
                    "direction {k} has norm {norm}, expected 1"
                )));
            }
        }
        Ok(Self { directions, b_value })
    }

    /// Normalises every direction before validating.
    pub fn from_unnormalized(directions: Vec<[f64; 3]>, b_value: f64) -> Result<Self> {
        let mut dirs = directions;
        for u in &mut dirs {
            let norm = (u[0] * u[0] + u[1] * u[1] + u[2] * u[2]).sqrt();
            if norm == 0.0 {
                return Err(Error::InvalidScheme("zero-length direction".into()));
            }
            u.iter_mut().for_each(|c| *c /= norm);
        }
        Self::new(dirs, b_value)
    }

    pub fn directions(&self) -> &[[f64; 3]] {
        &self.directions
    }

    pub fn b_value(&self) -> f64 {
        self.b_value
    }

    pub fn len(&self) -> usize {
        self.directions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.directions.is_empty()
    }
}

/// SH coefficients of one spherical function.
#[derive(Debug, Clone, PartialEq)]
pub struct ShVector {
    pub coeffs: Vec<f64>,
    pub n_max: usize,
}

impl ShVector {
    pub fn new(coeffs: Vec<f64>, n_max: usize) -> Result<Self> {
        let p = num_coeffs(n_max)?;
        if coeffs.len() != p {
            return Err(Error::Shape(format!(
                "expected {p} coefficients for n_max = {n_max}, got {}",
                coeffs.len()
            )));
        }
        Ok(Self { coeffs, n_max })
    }

    pub fn zeros(n_max: usize) -> Result<Self> {
        Self::new(vec![0.0; num_coeffs(n_max)?], n_max)
    }

    pub fn get(&self, n: usize, l: i64) -> f64 {
        self.coeffs[coeff_index(n, l)]
    }

    pub fn norm(&self) -> f64 {
        self.coeffs.iter().map(|c| c * c).sum::<f64>().sqrt()
    }

    /// Energy `Σ_l c_{n,l}²` of one band.
    pub fn band_energy(&self, n: usize) -> f64 {
        (-(n as i64)..=n as i64).map(|l| self.get(n, l).powi(2)).sum()
    }
}

/// Zonal kernel described by one Legendre coefficient `ξ_n` per even degree.
#[derive(Debug, Clone, PartialEq)]
pub struct ZonalKernel {
    pub legendre_coeffs: Vec<f64>,
}

impl ZonalKernel {
    pub fn new(legendre_coeffs: Vec<f64>) -> Result<Self> {
        if legendre_coeffs.is_empty() {
            return Err(Error::Empty("zonal kernel"));
        }
        Ok(Self { legendre_coeffs })
    }

    pub fn n_max(&self) -> usize {
        2 * (self.legendre_coeffs.len() - 1)
    }

    /// Coefficient of degree `n` (even).
    pub fn coeff(&self, n: usize) -> f64 {
        self.legendre_coeffs[n / 2]
    }

    /// Kernel profile `ξ(t) = Σ (2n+1)/(4π) ξ_n p_n(t)`.
    pub fn profile(&self, t: f64) -> f64 {
        let t = t.clamp(-1.0, 1.0);
        self.legendre_coeffs
            .iter()
            .enumerate()
            .map(|(i, xi)| {
                let n = 2 * i;
                (2 * n + 1) as f64 / (4.0 * std::f64::consts::PI) * xi * legendre_unchecked(n, t)
            })
            .sum()
    }
}

/// K×P design matrix of the scheme.
pub fn sh_basis(scheme: &GradientScheme, n_max: usize) -> Result<DMatrix<f64>> {
    let p = num_coeffs(n_max)?;
    let mut b = DMatrix::zeros(scheme.len(), p);
    for (k, u) in scheme.directions().iter().enumerate() {
        for (j, v) in basis_row(*u, n_max).into_iter().enumerate() {
            b[(k, j)] = v;
        }
    }
    Ok(b)
}

/// Precomputed regularised least-squares projector `(BᵀB + λΛ²)⁻¹Bᵀ`.
///
/// `Λ` is the Laplace–Beltrami diagonal `n(n+1)`.
#[derive(Debug, Clone)]
pub struct ShFitter {
    n_max: usize,
    projector: DMatrix<f64>,
}

/// Default Laplace–Beltrami regularisation weight.
pub const DEFAULT_REG: f64 = 0.006;

impl ShFitter {
    pub fn new(scheme: &GradientScheme, n_max: usize, reg: f64) -> Result<Self> {
        if !(reg >= 0.0) {
            return Err(Error::Config(format!("regularisation must be nonnegative, got {reg}")));
        }
        let p = num_coeffs(n_max)?;
        if reg == 0.0 && scheme.len() < p {
            return Err(Error::Singular(format!(
                "{} samples cannot determine {p} coefficients without regularisation",
                scheme.len()
            )));
        }
        let b = sh_basis(scheme, n_max)?;
        let mut normal = b.transpose() * &b;
        for (j, n) in degrees(n_max).into_iter().enumerate() {
            let lb = (n * (n + 1)) as f64;
            normal[(j, j)] += reg * lb * lb;
        }
        let chol = normal
            .cholesky()
            .ok_or_else(|| Error::Singular("normal equations are not positive definite".into()))?;
        let projector = chol.solve(&b.transpose());
        Ok(Self { n_max, projector })
    }

    pub fn n_max(&self) -> usize {
        self.n_max
    }

    pub fn num_samples(&self) -> usize {
        self.projector.ncols()
    }

    pub fn fit(&self, samples: &[f64]) -> Result<ShVector> {
        if samples.len() != self.num_samples() {
            return Err(Error::Shape(format!(
                "expected {} samples, got {}",
                self.num_samples(),
                samples.len()
            )));
        }
        let mut out = vec![0.0; self.projector.nrows()];
        self.fit_into(samples, &mut out);
        Ok(ShVector {
            coeffs: out,
            n_max: self.n_max,
        })
    }

    /// Allocation-free variant; slice lengths must already agree.
    pub fn fit_into(&self, samples: &[f64], out: &mut [f64]) {
        for (j, o) in out.iter_mut().enumerate() {
            *o = (0..samples.len()).map(|k| self.projector[(j, k)] * samples[k]).sum();
        }
    }
}

/// Least-squares SH fit of `samples` taken on `scheme`.
pub fn fit_sh(samples: &[f64], scheme: &GradientScheme, n_max: usize, reg: f64) -> Result<ShVector> {
    ShFitter::new(scheme, n_max, reg)?.fit(samples)
}

/// Renders coefficients on a scheme (`B·c`).
pub fn render(c: &ShVector, scheme: &GradientScheme) -> Vec<f64> {
    scheme.directions().iter().map(|u| eval_sh(c, *u)).collect()
}

/// Evaluates the expansion at unit vector `u`.
pub fn eval_sh(c: &ShVector, u: [f64; 3]) -> f64 {
    basis_row(u, c.n_max)
        .iter()
        .zip(&c.coeffs)
        .map(|(y, c)| y * c)
        .sum()
}

/// Spherical convolution with a zonal kernel: `c̃_{n,l} = ξ_n c_{n,l}`.
pub fn zonal_convolve(c: &ShVector, xi: &ZonalKernel) -> Result<ShVector> {
    if xi.n_max() != c.n_max {
        return Err(Error::Shape(format!(
            "kernel n_max {} does not match coefficients n_max {}",
            xi.n_max(),
            c.n_max
        )));
    }
    let coeffs = c
        .coeffs
        .iter()
        .zip(degrees(c.n_max))
        .map(|(v, n)| v * xi.coeff(n))
        .collect();
    Ok(ShVector {
        coeffs,
        n_max: c.n_max,
    })
}

/// Gauss–Legendre nodes and weights on [−1, 1].
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    for i in 0..n.div_ceil(2) {
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let p = legendre_unchecked(n, x);
            let pm1 = legendre_unchecked(n - 1, x);
            dp = n as f64 * (x * p - pm1) / (x * x - 1.0);
            let dx = p / dp;
            x -= dx;
            if dx.abs() < 1e-16 {
                break;
            }
        }
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        nodes[i] = -x;
        nodes[n - 1 - i] = x;
        weights[i] = w;
        weights[n - 1 - i] = w;
    }
    (nodes, weights)
}

/// Product Gauss rule on S²: Gauss–Legendre in `cos θ`, uniform in `φ`.
///
/// Integrates spherical polynomials of degree `< min(2·n_theta, n_phi)`
/// exactly.
pub fn sphere_quadrature(n_theta: usize, n_phi: usize) -> (Vec<[f64; 3]>, Vec<f64>) {
    let (zs, wz) = gauss_legendre(n_theta);
    let dphi = 2.0 * std::f64::consts::PI / n_phi as f64;
    let mut points = Vec::with_capacity(n_theta * n_phi);
    let mut weights = Vec::with_capacity(n_theta * n_phi);
    for (z, w) in zs.iter().zip(&wz) {
        let r = (1.0 - z * z).sqrt();
        for j in 0..n_phi {
            let phi = (j as f64 + 0.5) * dphi;
            points.push([r * phi.cos(), r * phi.sin(), *z]);
            weights.push(w * dphi);
        }
    }
    (points, weights)
}

/// M×M×M×P block of SH coefficients around one voxel; layout
/// `[x][y][z][channel]`, channel fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct ShCube {
    pub radius: usize,
    pub n_max: usize,
    pub data: Vec<f64>,
}

impl ShCube {
    pub fn new(radius: usize, n_max: usize, data: Vec<f64>) -> Result<Self> {
        let m = 2 * radius + 1;
        let p = num_coeffs(n_max)?;
        if data.len() != m * m * m * p {
            return Err(Error::Shape(format!(
                "SH cube with M = {m}, P = {p} needs {} values, got {}",
                m * m * m * p,
                data.len()
            )));
        }
        Ok(Self { radius, n_max, data })
    }

    pub fn side(&self) -> usize {
        2 * self.radius + 1
    }

    pub fn channels(&self) -> usize {
        (self.n_max + 1) * (self.n_max + 2) / 2
    }

    /// Coefficients at spatial offset `(x, y, z)` in `0..M`.
    pub fn site(&self, x: usize, y: usize, z: usize) -> &[f64] {
        let (m, p) = (self.side(), self.channels());
        let o = ((x * m + y) * m + z) * p;
        &self.data[o..o + p]
    }
}
