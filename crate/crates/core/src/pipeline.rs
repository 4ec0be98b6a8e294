//! End-to-end comparison of the DNN against the metric classifiers.
//!
//! For every ROI:
//!
//! * each metric (MD … CVD) is scored by the Gaussian LRT under
//!   leave-one-subject-out, using all ROI voxels;
//! * logistic regression on ROI-mean metric vectors, also leave-one-out;
//! * the DNN under stratified subject-level k-fold cross-validation; every
//!   subject is held out once and scored by its median PSIC.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::classify::{
    auc, bhattacharyya, loocv, median_psic_decision, roc_curve, youden_threshold, ClassifierSpec, SubjectData,
    SubjectScore,
};
use crate::dcnn::{NetworkConfig, NetworkParams};
use crate::dti::{metric_vector, MetricFlags, MetricVector, TensorFitter, METRIC_NAMES};
use crate::error::{Error, Result};
use crate::io::{assemble_sh_cubes, fit_volume_sh, interior_voxels, DcbContainer, ModelFile, PsicMap, RoiMask, Subject};
use crate::rng;
use crate::sh::{ShCube, DEFAULT_REG};
use crate::training::{predict_all, train, train_split, EpochRecord, LabeledDcSet, TrainingConfig};

const TAG_FOLDS: u64 = 0xf01d;
const TAG_FOLD_TRAIN: u64 = 0xf7a1;

/// Column order of the report.
pub const REPORT_COLUMNS: [&str; 10] = ["MD", "FA", "CL", "CP", "DV", "ASD", "DE", "CVD", "LR", "DNN"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub network: NetworkConfig,
    pub training: TrainingConfig,
    /// Subject-level folds for the DNN.
    pub folds: usize,
    /// Histogram bins for the per-voxel MD overlap.
    pub overlap_bins: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            network: NetworkConfig::default(),
            training: TrainingConfig::default(),
            folds: 5,
            overlap_bins: 32,
        }
    }
}

impl PipelineConfig {
    /// Points every random stream at `seed`.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.network.seed = seed;
        self.training.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.network.validate()?;
        self.training.validate()?;
        if self.folds < 2 {
            return Err(Error::Config(format!("need at least 2 folds, got {}", self.folds)));
        }
        if self.overlap_bins == 0 {
            return Err(Error::Config("overlap_bins must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VoxelMetrics {
    pub position: [usize; 3],
    pub metrics: MetricVector,
    pub flags: MetricFlags,
}

/// The eight metrics at every mask voxel, lexicographic order.
pub fn voxel_metrics(volume: &DcbContainer, mask: &RoiMask) -> Result<Vec<VoxelMetrics>> {
    if volume.dims != mask.dims {
        return Err(Error::Shape(format!("volume dims {:?} differ from mask dims {:?}", volume.dims, mask.dims)));
    }
    let fitter = TensorFitter::new(&volume.scheme()?)?;
    let [n1, n2, n3] = volume.dims;
    let positions: Vec<[usize; 3]> = (0..n1)
        .flat_map(|x| (0..n2).flat_map(move |y| (0..n3).map(move |z| [x, y, z])))
        .filter(|p| mask.contains(p[0], p[1], p[2]))
        .collect();
    positions
        .par_iter()
        .map(|&p| {
            let s: Vec<f64> = volume.voxel(p[0], p[1], p[2]).iter().map(|&v| f64::from(v)).collect();
            let (metrics, flags) = metric_vector(&s, &fitter)?;
            Ok(VoxelMetrics {
                position: p,
                metrics,
                flags,
            })
        })
        .collect()
}

pub fn metrics_csv(rows: &[VoxelMetrics]) -> String {
    let mut out = format!("x,y,z,{},negative_eigenvalues,undefined_shape,zero_mean_adc\n", METRIC_NAMES.join(","));
    for r in rows {
        let [x, y, z] = r.position;
        out.push_str(&format!("{x},{y},{z}"));
        for v in r.metrics.to_array() {
            out.push_str(&format!(",{v:.9e}"));
        }
        let f = r.flags;
        out.push_str(&format!(
            ",{},{},{}\n",
            u8::from(f.negative_eigenvalues),
            u8::from(f.undefined_shape),
            u8::from(f.zero_mean_adc)
        ));
    }
    out
}

/// SH cubes around every interior voxel of `mask`.
pub fn sh_cubes(volume: &DcbContainer, mask: &RoiMask, net: &NetworkConfig) -> Result<(Vec<[usize; 3]>, Vec<ShCube>)> {
    if volume.dims != mask.dims {
        return Err(Error::Shape(format!("volume dims {:?} differ from mask dims {:?}", volume.dims, mask.dims)));
    }
    let side = net.side();
    if volume.dims.iter().any(|&d| d < side) {
        return Err(Error::Shape(format!("radius {} does not fit a {:?} volume", net.radius, volume.dims)));
    }
    let sh = fit_volume_sh(volume, net.n_max, DEFAULT_REG)?;
    let centers = interior_voxels(mask, net.radius);
    let cubes = assemble_sh_cubes(&sh, &centers, net.radius)?;
    Ok((centers, cubes))
}

fn psic_map(mask: &RoiMask, centers: &[[usize; 3]], scores: &[f64]) -> PsicMap {
    let support = RoiMask::from_fn(mask.dims, |_, _, _| false);
    let mut map = PsicMap::new(support);
    for (c, &s) in centers.iter().zip(scores) {
        let i = map.index(c[0], c[1], c[2]);
        map.mask.data[i] = 1;
        map.scores[i] = s;
    }
    map
}

/// Scores every interior voxel; the map's mask is the set of scored voxels.
pub fn predict_map(params: &NetworkParams, volume: &DcbContainer, mask: &RoiMask) -> Result<PsicMap> {
    let (centers, cubes) = sh_cubes(volume, mask, params.config())?;
    if cubes.is_empty() {
        return Err(Error::Empty("no interior voxels in the mask"));
    }
    let scores = predict_all(params, &cubes)?;
    Ok(psic_map(mask, &centers, &scores))
}

/// Per-subject inputs for one ROI.
#[derive(Debug, Clone)]
pub struct PreparedSubject {
    pub id: String,
    pub label: u8,
    pub centers: Vec<[usize; 3]>,
    pub cubes: Vec<ShCube>,
    pub metrics: Vec<VoxelMetrics>,
}

pub fn prepare(subjects: &[Subject], roi: &str, net: &NetworkConfig) -> Result<Vec<PreparedSubject>> {
    subjects
        .par_iter()
        .map(|s| {
            let mask = s
                .rois
                .get(roi)
                .ok_or_else(|| Error::Config(format!("subject {} has no ROI {roi:?}", s.id)))?;
            let (centers, cubes) = sh_cubes(&s.volume, mask, net)?;
            Ok(PreparedSubject {
                id: s.id.clone(),
                label: s.label,
                centers,
                cubes,
                metrics: voxel_metrics(&s.volume, mask)?,
            })
        })
        .collect()
}

fn dc_set(subjects: &[&PreparedSubject]) -> Result<LabeledDcSet> {
    let mut samples = Vec::new();
    let mut labels = Vec::new();
    let mut ids = Vec::new();
    for s in subjects {
        samples.extend(s.cubes.iter().cloned());
        labels.extend(std::iter::repeat_n(s.label, s.cubes.len()));
        ids.extend(std::iter::repeat_n(s.id.clone(), s.cubes.len()));
    }
    LabeledDcSet::new(samples, labels, ids)
}

/// SHA-256 over sample coefficients, labels and subject ids.
pub fn data_digest(set: &LabeledDcSet) -> Vec<u8> {
    let mut h = Sha256::new();
    for ((c, l), id) in set.samples.iter().zip(&set.labels).zip(&set.subject_ids) {
        for v in &c.data {
            h.update(v.to_le_bytes());
        }
        h.update([*l]);
        h.update(id.as_bytes());
    }
    h.finalize().to_vec()
}

/// Trains one model on every interior DC of `roi`, split per the
/// training configuration.
pub fn train_model(subjects: &[Subject], roi: &str, cfg: &PipelineConfig) -> Result<(ModelFile, Vec<EpochRecord>)> {
    cfg.validate()?;
    let prepared = prepare(subjects, roi, &cfg.network)?;
    let set = dc_set(&prepared.iter().collect::<Vec<_>>())?;
    let outcome = train(&set, &cfg.network, &cfg.training)?;
    let fp = ModelFile::fingerprint(&cfg.training, &data_digest(&set));
    Ok((ModelFile::new(outcome.params, cfg.training.clone(), fp), outcome.history))
}

/// Stratified fold index per subject.
pub fn assign_folds(labels: &[u8], folds: usize, seed: u64) -> Result<Vec<usize>> {
    use rand::seq::SliceRandom;
    let mut out = vec![0; labels.len()];
    let mut rng = rng::stream(seed, &[TAG_FOLDS]);
    for class in [0u8, 1] {
        let mut idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        if idx.len() < folds {
            return Err(Error::Config(format!(
                "{} subjects of class {class} cannot fill {folds} folds",
                idx.len()
            )));
        }
        idx.shuffle(&mut rng);
        for (j, &i) in idx.iter().enumerate() {
            out[i] = j % folds;
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DnnFold {
    pub fold: usize,
    pub held_out: Vec<String>,
    /// Youden threshold on the training subjects' median PSIC.
    pub threshold: f64,
    pub valid_pa: f64,
    pub history: Vec<EpochRecord>,
}

#[derive(Debug, Clone, Serialize)]
pub struct ClassifierSummary {
    pub name: String,
    pub pa_youden: f64,
    pub pa_fixed: f64,
    pub auc: f64,
    pub scores: Vec<SubjectScore>,
}

#[derive(Debug, Clone, Serialize)]
pub struct RoiReport {
    pub roi: String,
    /// In [`REPORT_COLUMNS`] order.
    pub classifiers: Vec<ClassifierSummary>,
    /// Per-DC accuracy pooled over all held-out subjects.
    pub dnn_valid_pa: f64,
    pub dnn_folds: Vec<DnnFold>,
    /// Bhattacharyya coefficient of per-voxel MD, CN vs AD.
    pub md_overlap: f64,
    pub lr_non_converged: usize,
    pub voxels_with_flags: usize,
    pub dcs_per_subject: Vec<usize>,
}

impl RoiReport {
    pub fn classifier(&self, name: &str) -> Option<&ClassifierSummary> {
        self.classifiers.iter().find(|c| c.name == name)
    }

    /// Best AUC among the eight single metrics.
    pub fn best_metric_auc(&self) -> f64 {
        self.classifiers[..8].iter().map(|c| c.auc).fold(f64::NEG_INFINITY, f64::max)
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct EvalReport {
    pub config: PipelineConfig,
    pub rois: Vec<RoiReport>,
}

impl EvalReport {
    /// One block of rows (PA_youden, PA_fixed, AUC) per ROI.
    pub fn csv(&self) -> String {
        let mut out = format!("roi,measure,{}\n", REPORT_COLUMNS.join(","));
        for r in &self.rois {
            let rows: [(&str, fn(&ClassifierSummary) -> f64); 3] =
                [("PA_youden", |c| c.pa_youden), ("PA_fixed", |c| c.pa_fixed), ("AUC", |c| c.auc)];
            for (name, get) in rows {
                out.push_str(&format!("{},{name}", r.roi));
                for c in &r.classifiers {
                    out.push_str(&format!(",{:.6}", get(c)));
                }
                out.push('\n');
            }
        }
        out
    }

    pub fn json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialises") + "\n"
    }
}

/// Report plus the held-out PSIC map of every subject, keyed by ROI and id.
#[derive(Debug, Clone)]
pub struct EvalOutput {
    pub report: EvalReport,
    pub psic: Vec<(String, String, PsicMap)>,
}

fn summary(name: &str, scores: Vec<SubjectScore>, pa_fixed: f64) -> Result<ClassifierSummary> {
    let raw: Vec<f64> = scores.iter().map(|s| s.value).collect();
    let labels: Vec<u8> = scores.iter().map(|s| s.label).collect();
    let correct = scores.iter().filter(|s| s.predicted == s.label).count();
    Ok(ClassifierSummary {
        name: name.into(),
        pa_youden: correct as f64 / scores.len() as f64,
        pa_fixed,
        auc: auc(&roc_curve(&raw, &labels)?),
        scores,
    })
}

struct DnnOutcome {
    summary: ClassifierSummary,
    valid_pa: f64,
    folds: Vec<DnnFold>,
    psic: Vec<Vec<f64>>,
}

fn evaluate_dnn(prepared: &[PreparedSubject], cfg: &PipelineConfig) -> Result<DnnOutcome> {
    let labels: Vec<u8> = prepared.iter().map(|s| s.label).collect();
    let fold_of = assign_folds(&labels, cfg.folds, cfg.training.seed)?;
    let mut scores: Vec<Option<SubjectScore>> = vec![None; prepared.len()];
    let mut psic: Vec<Vec<f64>> = vec![Vec::new(); prepared.len()];
    let mut folds = Vec::with_capacity(cfg.folds);
    let (mut correct, mut total) = (0usize, 0usize);
    for f in 0..cfg.folds {
        let (held, rest): (Vec<usize>, Vec<usize>) = (0..prepared.len()).partition(|&i| fold_of[i] == f);
        let train_set = dc_set(&rest.iter().map(|&i| &prepared[i]).collect::<Vec<_>>())?;
        let valid_set = dc_set(&held.iter().map(|&i| &prepared[i]).collect::<Vec<_>>())?;
        let tcfg = TrainingConfig {
            seed: rng::derive_seed(cfg.training.seed, &[TAG_FOLD_TRAIN, f as u64]),
            ..cfg.training.clone()
        };
        log::info!("fold {}/{}: {} training DCs, {} held-out DCs", f + 1, cfg.folds, train_set.len(), valid_set.len());
        let outcome = train_split(&train_set, &valid_set, &cfg.network, &tcfg)?;
        let medians = |idx: &[usize]| -> Result<Vec<(f64, Vec<f64>)>> {
            idx.iter()
                .map(|&i| {
                    let p = predict_all(&outcome.params, &prepared[i].cubes)?;
                    Ok((median_psic_decision(&p)?.0, p))
                })
                .collect()
        };
        let train_medians: Vec<f64> = medians(&rest)?.into_iter().map(|m| m.0).collect();
        let train_labels: Vec<u8> = rest.iter().map(|&i| labels[i]).collect();
        let threshold = youden_threshold(&train_medians, &train_labels)?;
        let (mut fc, mut ft) = (0usize, 0usize);
        for (&i, (m, p)) in held.iter().zip(medians(&held)?) {
            fc += p.iter().filter(|&&g| u8::from(g >= 0.5) == labels[i]).count();
            ft += p.len();
            scores[i] = Some(SubjectScore {
                subject_id: prepared[i].id.clone(),
                value: m,
                predicted: u8::from(m >= threshold),
                label: labels[i],
            });
            psic[i] = p;
        }
        correct += fc;
        total += ft;
        folds.push(DnnFold {
            fold: f,
            held_out: held.iter().map(|&i| prepared[i].id.clone()).collect(),
            threshold,
            valid_pa: fc as f64 / ft as f64,
            history: outcome.history,
        });
    }
    let scores: Vec<SubjectScore> = scores.into_iter().map(|s| s.expect("every subject is held out once")).collect();
    let fixed = scores.iter().filter(|s| u8::from(s.value >= 0.5) == s.label).count() as f64 / scores.len() as f64;
    Ok(DnnOutcome {
        summary: summary("DNN", scores, fixed)?,
        valid_pa: correct as f64 / total as f64,
        folds,
        psic,
    })
}

fn evaluate_roi(subjects: &[Subject], roi: &str, cfg: &PipelineConfig) -> Result<(RoiReport, Vec<(String, String, PsicMap)>)> {
    let prepared = prepare(subjects, roi, &cfg.network)?;
    if let Some(s) = prepared.iter().find(|s| s.cubes.is_empty()) {
        return Err(Error::Config(format!("subject {} has no interior voxels in ROI {roi:?}", s.id)));
    }
    let cohort: Vec<SubjectData> = prepared
        .iter()
        .map(|s| SubjectData {
            id: s.id.clone(),
            label: s.label,
            voxels: s.metrics.iter().map(|v| v.metrics.to_array()).collect(),
        })
        .collect();
    let mut classifiers = Vec::with_capacity(10);
    for (m, name) in METRIC_NAMES.iter().enumerate() {
        let r = loocv(&cohort, ClassifierSpec::Lrt { metric: m })?;
        classifiers.push(summary(name, r.scores, r.pa_fixed)?);
    }
    let lr = loocv(&cohort, ClassifierSpec::Logistic)?;
    classifiers.push(summary("LR", lr.scores, lr.pa_fixed)?);
    let dnn = evaluate_dnn(&prepared, cfg)?;
    classifiers.push(dnn.summary);

    let md = |class: u8| -> Vec<f64> {
        cohort
            .iter()
            .filter(|s| s.label == class)
            .flat_map(|s| s.voxels.iter().map(|v| v[0]))
            .collect()
    };
    let report = RoiReport {
        roi: roi.to_string(),
        classifiers,
        dnn_valid_pa: dnn.valid_pa,
        dnn_folds: dnn.folds,
        md_overlap: bhattacharyya(&md(0), &md(1), cfg.overlap_bins)?,
        lr_non_converged: lr.non_converged,
        voxels_with_flags: prepared
            .iter()
            .flat_map(|s| &s.metrics)
            .filter(|v| v.flags.negative_eigenvalues || v.flags.undefined_shape || v.flags.zero_mean_adc)
            .count(),
        dcs_per_subject: prepared.iter().map(|s| s.cubes.len()).collect(),
    };
    let maps = prepared
        .iter()
        .zip(&dnn.psic)
        .zip(subjects)
        .map(|((p, scores), s)| (roi.to_string(), p.id.clone(), psic_map(&s.rois[roi], &p.centers, scores)))
        .collect();
    Ok((report, maps))
}

/// Runs every classifier on every ROI shared by all subjects.
pub fn evaluate(subjects: &[Subject], cfg: &PipelineConfig) -> Result<EvalOutput> {
    cfg.validate()?;
    let first = subjects.first().ok_or(Error::Empty("cohort"))?;
    let rois: Vec<String> = first
        .rois
        .keys()
        .filter(|r| subjects.iter().all(|s| s.rois.contains_key(*r)))
        .cloned()
        .collect();
    if rois.is_empty() {
        return Err(Error::Config("subjects share no ROI".into()));
    }
    let mut report = EvalReport {
        config: cfg.clone(),
        rois: Vec::new(),
    };
    let mut psic = Vec::new();
    for roi in &rois {
        let (r, maps) = evaluate_roi(subjects, roi, cfg)?;
        report.rois.push(r);
        psic.extend(maps);
    }
    Ok(EvalOutput { report, psic })
}
