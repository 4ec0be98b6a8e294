//! Single-tensor fitting and the eight scalar diffusion metrics.
//!
//! Metric order everywhere is `(MD, FA, CL, CP, DV, ASD, DE, CVD)`.

use nalgebra::{DMatrix, DVector, Matrix3, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sh::GradientScheme;

/// Normalised signals are clamped to `[SIGNAL_FLOOR, 1]` before the log.
pub const SIGNAL_FLOOR: f64 = 1e-6;

pub const METRIC_NAMES: [&str; 8] = ["MD", "FA", "CL", "CP", "DV", "ASD", "DE", "CVD"];

/// Apparent diffusivities `ADC_k = −ln(s_k)/b` in mm²/s.
#[derive(Debug, Clone, PartialEq)]
pub struct AdcSamples {
    pub values: Vec<f64>,
}

pub fn adc(signal: &[f64], b: f64) -> Result<AdcSamples> {
    if !(b > 0.0 && b.is_finite()) {
        return Err(Error::Domain { what: "b-value", value: b });
    }
    let values = signal
        .iter()
        .map(|&s| -s.clamp(SIGNAL_FLOOR, 1.0).ln() / b)
        .collect();
    Ok(AdcSamples { values })
}

#[derive(Debug, Clone, PartialEq)]
pub struct TensorFit {
    /// Symmetric diffusion tensor, mm²/s.
    pub tensor: [[f64; 3]; 3],
    /// Eigenvalues, descending.
    pub eigenvalues: [f64; 3],
    /// Unit eigenvectors matching `eigenvalues`.
    pub eigenvectors: [[f64; 3]; 3],
    /// RMS residual of the log-linear fit, mm²/s.
    pub residual: f64,
    /// Set when the smallest eigenvalue is negative (kept, not clipped).
    pub negative_eigenvalues: bool,
}

impl TensorFit {
    /// A fit with the given eigenvalues along the coordinate axes.
    pub fn from_eigenvalues(l1: f64, l2: f64, l3: f64) -> Self {
        let mut ev = [l1, l2, l3];
        ev.sort_by(|a, b| b.total_cmp(a));
        Self {
            tensor: [[l1, 0.0, 0.0], [0.0, l2, 0.0], [0.0, 0.0, l3]],
            eigenvalues: ev,
            eigenvectors: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            residual: 0.0,
            negative_eigenvalues: ev[2] < 0.0,
        }
    }
}

/// Row `[ux², uy², uz², 2uxuy, 2uxuz, 2uyuz]` of the tensor design matrix.
pub fn design_row(u: [f64; 3]) -> [f64; 6] {
    let [x, y, z] = u;
    [x * x, y * y, z * z, 2.0 * x * y, 2.0 * x * z, 2.0 * y * z]
}

/// Log-linear least-squares tensor estimator for one gradient scheme.
#[derive(Debug, Clone)]
pub struct TensorFitter {
    design: DMatrix<f64>,
    pinv: DMatrix<f64>,
    b_value: f64,
}

impl TensorFitter {
    pub fn new(scheme: &GradientScheme) -> Result<Self> {
        let k = scheme.len();
        let design = DMatrix::from_fn(k, 6, |r, c| design_row(scheme.directions()[r])[c]);
        let svd = design.clone().svd(true, true);
        let smax = svd.singular_values.max();
        let rank = svd.singular_values.iter().filter(|&&s| s > 1e-10 * smax).count();
        if rank < 6 {
            return Err(Error::RankDeficient { rank });
        }
        let pinv = svd
            .pseudo_inverse(1e-10 * smax)
            .map_err(|e| Error::Singular(e.to_string()))?;
        Ok(Self {
            design,
            pinv,
            b_value: scheme.b_value(),
        })
    }

    /// Condition number of the design matrix.
    pub fn condition_number(&self) -> f64 {
        let s = self.design.singular_values();
        s.max() / s.min()
    }

    pub fn fit(&self, signal: &[f64]) -> Result<TensorFit> {
        self.fit_adc(&adc(signal, self.b_value)?)
    }

    pub fn fit_adc(&self, adc: &AdcSamples) -> Result<TensorFit> {
        if adc.values.len() != self.design.nrows() {
            return Err(Error::Shape(format!(
                "scheme has {} directions, got {} samples",
                self.design.nrows(),
                adc.values.len()
            )));
        }
        let y = DVector::from_column_slice(&adc.values);
        let d = &self.pinv * &y;
        let residual = ((&self.design * &d - &y).norm_squared() / y.len() as f64).sqrt();
        let m = Matrix3::new(d[0], d[3], d[4], d[3], d[1], d[5], d[4], d[5], d[2]);
        let eig = SymmetricEigen::new(m);
        let mut order = [0usize, 1, 2];
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
        let eigenvalues = order.map(|i| eig.eigenvalues[i]);
        let eigenvectors = order.map(|i| {
            let v = eig.eigenvectors.column(i);
            [v[0], v[1], v[2]]
        });
        Ok(TensorFit {
            tensor: [[d[0], d[3], d[4]], [d[3], d[1], d[5]], [d[4], d[5], d[2]]],
            eigenvalues,
            eigenvectors,
            residual,
            negative_eigenvalues: eigenvalues[2] < 0.0,
        })
    }
}

pub fn fit_tensor(signal: &[f64], scheme: &GradientScheme) -> Result<TensorFit> {
    TensorFitter::new(scheme)?.fit(signal)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WestinMetrics {
    pub md: f64,
    pub fa: f64,
    pub cl: f64,
    pub cp: f64,
    /// λ₁ ≤ 0: CL and CP are undefined and reported as 0.
    pub undefined_shape: bool,
}

/// MD, FA and the λ₁-normalised linearity/planarity.
pub fn westin_metrics(fit: &TensorFit) -> WestinMetrics {
    let [l1, l2, l3] = fit.eigenvalues;
    let md = (l1 + l2 + l3) / 3.0;
    let norm = (l1 * l1 + l2 * l2 + l3 * l3).sqrt();
    // Pairwise form of √(3/2)·‖λ − MD‖/‖λ‖; exactly zero for equal eigenvalues.
    let spread = ((l1 - l2).powi(2) + (l2 - l3).powi(2) + (l3 - l1).powi(2)).sqrt();
    let fa = if norm > 0.0 { spread / (2f64.sqrt() * norm) } else { 0.0 };
    let undefined_shape = l1 <= 0.0;
    let (cl, cp) = if undefined_shape { (0.0, 0.0) } else { ((l1 - l2) / l1, (l2 - l3) / l1) };
    WestinMetrics {
        md,
        fa,
        cl,
        cp,
        undefined_shape,
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelFreeMetrics {
    pub dv: f64,
    pub asd: f64,
    pub de: f64,
    pub cvd: f64,
    /// Mean ADC is zero: CVD is reported as 0.
    pub zero_mean: bool,
}

/// ASD = mean ADC, CVD = population std / mean, DE = Σ ADC², DV = (4π/3)·ASD^{3/2}.
pub fn model_free_metrics(adc: &AdcSamples) -> Result<ModelFreeMetrics> {
    let v = &adc.values;
    if v.len() < 2 {
        return Err(Error::Empty("model-free metrics need at least two samples"));
    }
    let k = v.len() as f64;
    let asd = v.iter().sum::<f64>() / k;
    // Shifted by the first sample: exactly zero for constant input.
    let (s1, s2) = v.iter().fold((0.0, 0.0), |(s1, s2), a| {
        let d = a - v[0];
        (s1 + d, s2 + d * d)
    });
    let var = (s2 / k - (s1 / k).powi(2)).max(0.0);
    let de = v.iter().map(|a| a * a).sum();
    let zero_mean = asd == 0.0;
    let cvd = if zero_mean { 0.0 } else { var.sqrt() / asd };
    let dv = 4.0 * std::f64::consts::PI / 3.0 * asd.max(0.0).powf(1.5);
    Ok(ModelFreeMetrics {
        dv,
        asd,
        de,
        cvd,
        zero_mean,
    })
}

/// The eight metrics in fixed order.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricVector {
    pub md: f64,
    pub fa: f64,
    pub cl: f64,
    pub cp: f64,
    pub dv: f64,
    pub asd: f64,
    pub de: f64,
    pub cvd: f64,
}

impl MetricVector {
    pub fn to_array(&self) -> [f64; 8] {
        [self.md, self.fa, self.cl, self.cp, self.dv, self.asd, self.de, self.cvd]
    }

    pub fn from_array(a: [f64; 8]) -> Self {
        let [md, fa, cl, cp, dv, asd, de, cvd] = a;
        Self {
            md,
            fa,
            cl,
            cp,
            dv,
            asd,
            de,
            cvd,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct MetricFlags {
    pub negative_eigenvalues: bool,
    pub undefined_shape: bool,
    pub zero_mean_adc: bool,
}

pub fn metric_vector(signal: &[f64], fitter: &TensorFitter) -> Result<(MetricVector, MetricFlags)> {
    let a = adc(signal, fitter.b_value)?;
    let fit = fitter.fit_adc(&a)?;
    let w = westin_metrics(&fit);
    let f = model_free_metrics(&a)?;
    Ok((
        MetricVector {
            md: w.md,
            fa: w.fa,
            cl: w.cl,
            cp: w.cp,
            dv: f.dv,
            asd: f.asd,
            de: f.de,
            cvd: f.cvd,
        },
        MetricFlags {
            negative_eigenvalues: fit.negative_eigenvalues,
            undefined_shape: w.undefined_shape,
            zero_mean_adc: f.zero_mean,
        },
    ))
}
