use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::error::{Error, Result};

/// L2 penalty on all coefficients, intercept included.
pub const LR_L2: f64 = 1e-4;
pub const LR_MAX_ITER: usize = 100;
const GRAD_TOL: f64 = 1e-10;

/// Per-feature z-scoring fitted on one training fold.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    /// Population standard deviation; constant features keep scale 1.
    pub scale: Vec<f64>,
}

impl Standardizer {
    pub fn fit(features: &[Vec<f64>]) -> Result<Self> {
        let first = features.first().ok_or(Error::Empty("no feature vectors"))?;
        let d = first.len();
        if features.iter().any(|f| f.len() != d) {
            return Err(Error::Shape("feature vectors differ in length".into()));
        }
        let n = features.len() as f64;
        let mean: Vec<f64> = (0..d).map(|j| features.iter().map(|f| f[j]).sum::<f64>() / n).collect();
        let scale = (0..d)
            .map(|j| {
                let var = features.iter().map(|f| (f[j] - mean[j]).powi(2)).sum::<f64>() / n;
                if var > 0.0 {
                    var.sqrt()
                } else {
                    1.0
                }
            })
            .collect();
        Ok(Self { mean, scale })
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(self.mean.iter().zip(&self.scale))
            .map(|(v, (m, s))| (v - m) / s)
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LogisticModel {
    pub standardizer: Standardizer,
    pub intercept: f64,
    /// Coefficients on standardised features.
    pub weights: Vec<f64>,
    pub converged: bool,
    pub iterations: usize,
    /// Norm of the penalised log-likelihood gradient at the returned model.
    pub gradient_norm: f64,
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + e^z)` without overflow.
fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

struct Problem {
    /// Rows `[1, x̃]`.
    x: DMatrix<f64>,
    y: DVector<f64>,
    l2: f64,
}

impl Problem {
    fn objective(&self, theta: &DVector<f64>) -> f64 {
        let z = &self.x * theta;
        let nll: f64 = z.iter().zip(self.y.iter()).map(|(z, y)| softplus(*z) - y * z).sum();
        nll + 0.5 * self.l2 * theta.norm_squared()
    }

    fn gradient_hessian(&self, theta: &DVector<f64>) -> (DVector<f64>, DMatrix<f64>) {
        let z = &self.x * theta;
        let p = z.map(sigmoid);
        let g = self.x.transpose() * (&p - &self.y) + self.l2 * theta;
        let w = p.map(|p| p * (1.0 - p));
        let mut xw = self.x.clone();
        for (mut row, wi) in xw.row_iter_mut().zip(w.iter()) {
            row *= *wi;
        }
        let mut h = self.x.transpose() * xw;
        for i in 0..h.nrows() {
            h[(i, i)] += self.l2;
        }
        (g, h)
    }
}

/// Penalised maximum likelihood by damped Newton iterations.
///
/// Features are standardised with statistics of `features` itself. If the
/// iteration limit is reached the partial model is returned with
/// `converged = false`.
pub fn logistic_fit(features: &[Vec<f64>], labels: &[u8], l2: f64) -> Result<LogisticModel> {
    if features.len() != labels.len() {
        return Err(Error::Shape(format!("{} feature vectors, {} labels", features.len(), labels.len())));
    }
    let standardizer = Standardizer::fit(features)?;
    let d = standardizer.mean.len();
    let n = features.len();
    let mut x = DMatrix::zeros(n, d + 1);
    for (i, f) in features.iter().enumerate() {
        x[(i, 0)] = 1.0;
        for (j, v) in standardizer.apply(f).into_iter().enumerate() {
            x[(i, j + 1)] = v;
        }
    }
    let y = DVector::from_iterator(n, labels.iter().map(|&l| f64::from(l)));
    let prob = Problem { x, y, l2 };
    let mut theta = DVector::zeros(d + 1);
    let mut f = prob.objective(&theta);
    let mut converged = false;
    let mut iterations = 0;
    let mut gnorm = f64::INFINITY;
    while iterations < LR_MAX_ITER {
        let (g, h) = prob.gradient_hessian(&theta);
        gnorm = g.norm();
        if gnorm < GRAD_TOL {
            converged = true;
            break;
        }
        let step = h
            .cholesky()
            .ok_or_else(|| Error::Singular("logistic Hessian".into()))?
            .solve(&g);
        iterations += 1;
        // Backtracking on the objective.
        let mut t = 1.0;
        loop {
            let cand = &theta - t * &step;
            let fc = prob.objective(&cand);
            if fc <= f || t < 1e-10 {
                theta = cand;
                f = fc;
                break;
            }
            t *= 0.5;
        }
    }
    if !converged {
        let (g, _) = prob.gradient_hessian(&theta);
        gnorm = g.norm();
        converged = gnorm < GRAD_TOL;
        if !converged {
            log::warn!("logistic regression stopped after {iterations} iterations, gradient norm {gnorm:.3e}");
        }
    }
    Ok(LogisticModel {
        standardizer,
        intercept: theta[0],
        weights: theta.iter().skip(1).copied().collect(),
        converged,
        iterations,
        gradient_norm: gnorm,
    })
}

/// Probability of the AD class.
pub fn logistic_predict(model: &LogisticModel, feature: &[f64]) -> f64 {
    let z = model.intercept
        + model
            .standardizer
            .apply(feature)
            .iter()
            .zip(&model.weights)
            .map(|(x, w)| x * w)
            .sum::<f64>();
    sigmoid(z)
}
