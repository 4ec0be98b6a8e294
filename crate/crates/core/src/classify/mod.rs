//! Subject-level classifiers and their evaluation.
//!
//! Labels are `0` (CN) and `1` (AD) throughout.

mod logistic;
mod loocv;
mod roc;

pub use logistic::{logistic_fit, logistic_predict, LogisticModel, Standardizer, LR_L2, LR_MAX_ITER};
pub use loocv::{loocv, ClassifierSpec, FoldAudit, LoocvResult, SubjectData};
pub use roc::{auc, bhattacharyya, roc_curve, youden_threshold, RocCurve, RocPoint};

use serde::Serialize;

use crate::error::{Error, Result};

/// Median with the midpoint of the middle two for even counts.
pub fn median(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::Empty("median of an empty list"));
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Ok(if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) })
}

/// Regional median PSIC and the resulting label (AD iff median ≥ 0.5).
pub fn median_psic_decision(psic: &[f64]) -> Result<(f64, u8)> {
    let m = median(psic).map_err(|_| Error::Empty("ROI has no PSIC values"))?;
    Ok((m, u8::from(m >= 0.5)))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SubjectScore {
    pub subject_id: String,
    /// Regional statistic (median PSIC, LRT Δ or LR probability).
    pub value: f64,
    pub predicted: u8,
    pub label: u8,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Gaussian {
    pub mean: f64,
    pub var: f64,
}

impl Gaussian {
    /// Sample mean and unbiased variance.
    fn fit(values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
        Self { mean, var }
    }

    pub fn log_pdf(&self, x: f64) -> f64 {
        -0.5 * ((2.0 * std::f64::consts::PI * self.var).ln() + (x - self.mean).powi(2) / self.var)
    }
}

/// Per-class Gaussian densities of one metric within one ROI.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GaussianClassModel {
    pub cn: Gaussian,
    pub ad: Gaussian,
    /// A class variance was raised to the `1e-12·mean²` floor.
    pub floored: bool,
}

pub fn fit_gaussian_model(values_cn: &[f64], values_ad: &[f64]) -> Result<GaussianClassModel> {
    if values_cn.len() < 2 || values_ad.len() < 2 {
        return Err(Error::Empty("Gaussian class model needs two values per class"));
    }
    let mut floored = false;
    let mut fit = |v: &[f64]| {
        let mut g = Gaussian::fit(v);
        let floor = (1e-12 * g.mean * g.mean).max(f64::MIN_POSITIVE);
        if !(g.var >= floor) {
            g.var = floor;
            floored = true;
        }
        g
    };
    let cn = fit(values_cn);
    let ad = fit(values_ad);
    Ok(GaussianClassModel { cn, ad, floored })
}

/// `Δ = Σ log p_AD(μ) − Σ log p_CN(μ)`; the decision is AD iff `Δ ≥ η`.
pub fn lrt_statistic(model: &GaussianClassModel, observed: &[f64]) -> Result<f64> {
    if observed.is_empty() {
        return Err(Error::Empty("no observations for the likelihood ratio"));
    }
    Ok(observed
        .iter()
        .map(|&x| model.ad.log_pdf(x) - model.cn.log_pdf(x))
        .sum())
}
