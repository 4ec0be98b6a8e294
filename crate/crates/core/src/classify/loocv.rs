use rayon::prelude::*;
use serde::Serialize;

use super::{
    auc, fit_gaussian_model, logistic_fit, logistic_predict, lrt_statistic, roc_curve, youden_threshold,
    SubjectScore, LR_L2,
};
use crate::error::{Error, Result};

/// One subject's in-ROI metric vectors, `(MD, FA, CL, CP, DV, ASD, DE, CVD)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SubjectData {
    pub id: String,
    pub label: u8,
    pub voxels: Vec<[f64; 8]>,
}

impl SubjectData {
    /// ROI means of the eight metrics.
    pub fn mean_features(&self) -> Vec<f64> {
        let n = self.voxels.len() as f64;
        (0..8).map(|m| self.voxels.iter().map(|v| v[m]).sum::<f64>() / n).collect()
    }

    pub fn metric(&self, m: usize) -> Vec<f64> {
        self.voxels.iter().map(|v| v[m]).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClassifierSpec {
    /// Gaussian likelihood-ratio test on one metric (index into the vector),
    /// class densities pooled over the voxels of the training subjects.
    Lrt { metric: usize },
    /// Logistic regression on the eight ROI-mean metrics.
    Logistic,
}

impl ClassifierSpec {
    /// Threshold of the fixed operating point (η = 0 or probability ½).
    pub fn fixed_threshold(&self) -> f64 {
        match self {
            Self::Lrt { .. } => 0.0,
            Self::Logistic => 0.5,
        }
    }
}

/// What one fold was fitted on.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FoldAudit {
    pub held_out: String,
    pub training_ids: Vec<String>,
    /// Flattened fitted model: class means/variances or LR coefficients.
    pub model: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LoocvResult {
    /// Held-out scores; `predicted` uses the fold's Youden threshold.
    pub scores: Vec<SubjectScore>,
    pub pa_youden: f64,
    pub pa_fixed: f64,
    pub auc: f64,
    pub audit: Vec<FoldAudit>,
    /// Folds whose logistic fit hit the iteration limit.
    pub non_converged: usize,
}

struct Fold {
    score: f64,
    threshold: f64,
    audit: FoldAudit,
    converged: bool,
}

fn fit_fold(train: &[&SubjectData], held: &SubjectData, spec: ClassifierSpec) -> Result<Fold> {
    let labels: Vec<u8> = train.iter().map(|s| s.label).collect();
    let (model, train_scores, score, converged) = match spec {
        ClassifierSpec::Lrt { metric } => {
            let pooled = |class: u8| -> Vec<f64> {
                train
                    .iter()
                    .filter(|s| s.label == class)
                    .flat_map(|s| s.voxels.iter().map(|v| v[metric]))
                    .collect()
            };
            let model = fit_gaussian_model(&pooled(0), &pooled(1))?;
            let train_scores = train
                .iter()
                .map(|s| lrt_statistic(&model, &s.metric(metric)))
                .collect::<Result<Vec<_>>>()?;
            let score = lrt_statistic(&model, &held.metric(metric))?;
            let flat = vec![model.cn.mean, model.cn.var, model.ad.mean, model.ad.var];
            (flat, train_scores, score, true)
        }
        ClassifierSpec::Logistic => {
            let feats: Vec<Vec<f64>> = train.iter().map(|s| s.mean_features()).collect();
            let model = logistic_fit(&feats, &labels, LR_L2)?;
            let train_scores = feats.iter().map(|f| logistic_predict(&model, f)).collect();
            let score = logistic_predict(&model, &held.mean_features());
            let mut flat = vec![model.intercept];
            flat.extend(&model.weights);
            flat.extend(&model.standardizer.mean);
            flat.extend(&model.standardizer.scale);
            (flat, train_scores, score, model.converged)
        }
    };
    Ok(Fold {
        score,
        threshold: youden_threshold(&train_scores, &labels)?,
        audit: FoldAudit {
            held_out: held.id.clone(),
            training_ids: train.iter().map(|s| s.id.clone()).collect(),
            model,
        },
        converged,
    })
}

/// Leave-one-subject-out evaluation. Folds run in parallel; results are
/// collected in cohort order.
pub fn loocv(cohort: &[SubjectData], spec: ClassifierSpec) -> Result<LoocvResult> {
    let ad = cohort.iter().filter(|s| s.label == 1).count();
    if ad < 2 || cohort.len() - ad < 2 {
        return Err(Error::SingleClass("LOOCV needs at least two subjects per class"));
    }
    if cohort.iter().any(|s| s.voxels.is_empty()) {
        return Err(Error::Empty("subject without ROI voxels"));
    }
    let folds: Vec<Fold> = (0..cohort.len())
        .into_par_iter()
        .map(|i| {
            let train: Vec<&SubjectData> = cohort
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != i)
                .map(|(_, s)| s)
                .collect();
            fit_fold(&train, &cohort[i], spec)
        })
        .collect::<Result<_>>()?;
    let labels: Vec<u8> = cohort.iter().map(|s| s.label).collect();
    let raw: Vec<f64> = folds.iter().map(|f| f.score).collect();
    let n = cohort.len() as f64;
    let fixed = spec.fixed_threshold();
    let correct_fixed = folds
        .iter()
        .zip(&labels)
        .filter(|(f, &l)| u8::from(f.score >= fixed) == l)
        .count();
    let scores: Vec<SubjectScore> = folds
        .iter()
        .zip(cohort)
        .map(|(f, s)| SubjectScore {
            subject_id: s.id.clone(),
            value: f.score,
            predicted: u8::from(f.score >= f.threshold),
            label: s.label,
        })
        .collect();
    let correct_youden = scores.iter().filter(|s| s.predicted == s.label).count();
    Ok(LoocvResult {
        pa_youden: correct_youden as f64 / n,
        pa_fixed: correct_fixed as f64 / n,
        auc: auc(&roc_curve(&raw, &labels)?),
        non_converged: folds.iter().filter(|f| !f.converged).count(),
        audit: folds.into_iter().map(|f| f.audit).collect(),
        scores,
    })
}
