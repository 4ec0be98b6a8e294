//! Dataset assembly, splitting, cross-entropy training with Adam and
//! dropout, and prediction accuracy.
//!
//! Batches are evaluated in fixed-size chunks. Each chunk accumulates its
//! gradient sequentially and chunk results are summed in chunk order, so a
//! run is bit-reproducible regardless of how many worker threads rayon uses.

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dcnn::{backward_into, forward_with_dropout, init_params, predict, NetworkConfig, NetworkParams};
use crate::error::{Error, Result};
use crate::rng;
use crate::sh::ShCube;

/// Samples per deterministic reduction chunk.
pub const CHUNK: usize = 16;

const CE_EPS: f64 = 1e-12;
pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

// Stream tags for seed splitting.
const TAG_SPLIT: u64 = 0x5b11;
const TAG_SHUFFLE: u64 = 0x5e0f;
const TAG_DROPOUT: u64 = 0xd0d0;

/// Labelled SH cubes. Label 1 is the pathology (AD) class.
#[derive(Debug, Clone, Default)]
pub struct LabeledDcSet {
    pub samples: Vec<ShCube>,
    pub labels: Vec<u8>,
    pub subject_ids: Vec<String>,
}

impl LabeledDcSet {
    pub fn new(samples: Vec<ShCube>, labels: Vec<u8>, subject_ids: Vec<String>) -> Result<Self> {
        if samples.len() != labels.len() || samples.len() != subject_ids.len() {
            return Err(Error::Shape(format!(
                "{} samples, {} labels, {} subject ids",
                samples.len(),
                labels.len(),
                subject_ids.len()
            )));
        }
        if let Some(bad) = labels.iter().find(|&&l| l > 1) {
            return Err(Error::Domain {
                what: "label",
                value: *bad as f64,
            });
        }
        Ok(Self {
            samples,
            labels,
            subject_ids,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// `(CN, AD)` sample counts.
    pub fn class_counts(&self) -> (usize, usize) {
        let ad = self.labels.iter().filter(|&&l| l == 1).count();
        (self.len() - ad, ad)
    }

    pub fn subset(&self, idx: &[usize]) -> Self {
        Self {
            samples: idx.iter().map(|&i| self.samples[i].clone()).collect(),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            subject_ids: idx.iter().map(|&i| self.subject_ids[i].clone()).collect(),
        }
    }

    pub fn extend(&mut self, other: Self) {
        self.samples.extend(other.samples);
        self.labels.extend(other.labels);
        self.subject_ids.extend(other.subject_ids);
    }

    /// Distinct subject ids in order of first appearance.
    pub fn subjects(&self) -> Vec<&str> {
        let mut seen = std::collections::HashSet::new();
        self.subject_ids
            .iter()
            .filter(|s| seen.insert(s.as_str()))
            .map(String::as_str)
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SplitMode {
    /// Shuffle individual cubes; cubes of one subject may land on both sides.
    #[default]
    BySample,
    /// Whole subjects go to one side, stratified by subject label.
    BySubject,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Checkpoint {
    #[default]
    LastEpoch,
    /// Parameters of the first epoch reaching the highest validation PA.
    BestValidation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub keep_prob: f64,
    /// `(train, valid)` proportions.
    pub split_ratio: (u32, u32),
    pub split_mode: SplitMode,
    /// Drives the split, the epoch shuffles and the dropout masks. Weight
    /// initialisation uses `NetworkConfig::seed`.
    pub seed: u64,
    pub checkpoint: Checkpoint,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.5e-3,
            batch_size: 256,
            epochs: 200,
            keep_prob: 0.7,
            split_ratio: (4, 1),
            split_mode: SplitMode::BySample,
            seed: 0,
            checkpoint: Checkpoint::LastEpoch,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.keep_prob > 0.0 && self.keep_prob <= 1.0) {
            return Err(Error::Domain {
                what: "keep_prob",
                value: self.keep_prob,
            });
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::Domain {
                what: "learning_rate",
                value: self.learning_rate,
            });
        }
        if self.split_ratio.0 + self.split_ratio.1 == 0 {
            return Err(Error::Config("split ratio 0:0".into()));
        }
        Ok(())
    }
}

fn valid_count(n: usize, ratio: (u32, u32)) -> usize {
    let total = (ratio.0 + ratio.1) as usize;
    (n * ratio.1 as usize + total / 2) / total
}

/// Randomised train/validation split, reproducible from `seed`.
pub fn split_dataset(
    set: &LabeledDcSet,
    ratio: (u32, u32),
    mode: SplitMode,
    seed: u64,
) -> Result<(LabeledDcSet, LabeledDcSet)> {
    if set.is_empty() {
        return Err(Error::Empty("dataset"));
    }
    if ratio.0 + ratio.1 == 0 {
        return Err(Error::Config("split ratio 0:0".into()));
    }
    let mut rng = rng::stream(seed, &[TAG_SPLIT]);
    let mut is_valid = vec![false; set.len()];
    match mode {
        SplitMode::BySample => {
            let mut idx: Vec<usize> = (0..set.len()).collect();
            idx.shuffle(&mut rng);
            for &i in &idx[..valid_count(set.len(), ratio)] {
                is_valid[i] = true;
            }
        }
        SplitMode::BySubject => {
            let subjects = set.subjects();
            let label_of = |s: &str| {
                let ad = (0..set.len())
                    .filter(|&i| set.subject_ids[i] == s)
                    .filter(|&i| set.labels[i] == 1)
                    .count();
                let all = set.subject_ids.iter().filter(|id| *id == s).count();
                u8::from(2 * ad >= all)
            };
            let mut chosen = std::collections::HashSet::new();
            for class in [0, 1] {
                let mut group: Vec<&str> = subjects.iter().copied().filter(|s| label_of(s) == class).collect();
                group.shuffle(&mut rng);
                chosen.extend(group[..valid_count(group.len(), ratio)].iter().copied());
            }
            for (i, s) in set.subject_ids.iter().enumerate() {
                is_valid[i] = chosen.contains(s.as_str());
            }
        }
    }
    let (valid, train): (Vec<usize>, Vec<usize>) = (0..set.len()).partition(|&i| is_valid[i]);
    if valid.is_empty() {
        return Err(Error::Empty("validation partition"));
    }
    if train.is_empty() {
        return Err(Error::Empty("training partition"));
    }
    Ok((set.subset(&train), set.subset(&valid)))
}

/// Two-class cross-entropy with `γ` clipped to `[1e-12, 1 − 1e-12]`.
pub fn cross_entropy(gamma: f64, gamma0: f64) -> f64 {
    let g = gamma.clamp(CE_EPS, 1.0 - CE_EPS);
    -(gamma0 * g.ln() + (1.0 - gamma0) * (1.0 - g).ln())
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }
}

/// One bias-corrected Adam update. A non-finite gradient leaves parameters
/// and state untouched.
pub fn adam_step(params: &mut [f64], grads: &[f64], state: &mut AdamState, learning_rate: f64) -> Result<()> {
    if params.len() != grads.len() || state.m.len() != grads.len() {
        return Err(Error::Shape(format!(
            "{} parameters, {} gradients, {} moments",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    if let Some(index) = grads.iter().position(|g| !g.is_finite()) {
        return Err(Error::NonFiniteGradient { index });
    }
    state.t += 1;
    let c1 = 1.0 - ADAM_BETA1.powi(state.t as i32);
    let c2 = 1.0 - ADAM_BETA2.powi(state.t as i32);
    for (((p, &g), m), v) in params.iter_mut().zip(grads).zip(&mut state.m).zip(&mut state.v) {
        *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
        *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
        *p -= learning_rate * (*m / c1) / ((*v / c2).sqrt() + ADAM_EPS);
    }
    Ok(())
}

/// PA = 1 − mean |γ̂ − γ₀| with γ̂ = 1 iff score ≥ 0.5.
pub fn pa_from_scores(scores: &[f64], labels: &[u8]) -> f64 {
    if scores.is_empty() {
        return 0.0;
    }
    let err: f64 = scores
        .iter()
        .zip(labels)
        .map(|(&s, &l)| (f64::from(u8::from(s >= 0.5)) - f64::from(l)).abs())
        .sum();
    1.0 - err / scores.len() as f64
}

/// PSIC scores of every sample, evaluated in parallel.
pub fn predict_all(params: &NetworkParams, samples: &[ShCube]) -> Result<Vec<f64>> {
    samples.par_iter().map(|c| predict(params, c)).collect()
}

pub fn prediction_accuracy(params: &NetworkParams, set: &LabeledDcSet) -> Result<f64> {
    if set.is_empty() {
        return Err(Error::Empty("evaluation set"));
    }
    Ok(pa_from_scores(&predict_all(params, &set.samples)?, &set.labels))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_loss: f64,
    /// Running accuracy of the dropout-mode passes over the epoch.
    pub train_pa: f64,
    pub valid_pa: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: NetworkParams,
    pub history: Vec<EpochRecord>,
}

pub fn history_csv(history: &[EpochRecord]) -> String {
    let mut out = String::from("epoch,mean_loss,train_pa,valid_pa\n");
    for r in history {
        out.push_str(&format!("{},{:.9},{:.6},{:.6}\n", r.epoch, r.mean_loss, r.train_pa, r.valid_pa));
    }
    out
}

/// Splits `set` per `cfg` and trains on the training part.
pub fn train(set: &LabeledDcSet, net_cfg: &NetworkConfig, cfg: &TrainingConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let (tr, va) = split_dataset(set, cfg.split_ratio, cfg.split_mode, cfg.seed)?;
    train_split(&tr, &va, net_cfg, cfg)
}

struct ChunkResult {
    grad: Vec<f64>,
    loss: f64,
    correct: usize,
}

/// Trains on `train_set`, monitoring PA on `valid_set` after every epoch.
pub fn train_split(
    train_set: &LabeledDcSet,
    valid_set: &LabeledDcSet,
    net_cfg: &NetworkConfig,
    cfg: &TrainingConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let (cn, ad) = train_set.class_counts();
    if cn == 0 || ad == 0 {
        return Err(Error::SingleClass("training set"));
    }
    let mut params = init_params(net_cfg, net_cfg.seed)?;
    let n_params = params.len();
    let mut adam = AdamState::new(n_params);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, NetworkParams)> = None;

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng::stream(cfg.seed, &[TAG_SHUFFLE, epoch as u64]));
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        for batch in order.chunks(cfg.batch_size) {
            let chunks: Vec<ChunkResult> = batch
                .par_chunks(CHUNK)
                .map(|chunk| -> Result<ChunkResult> {
                    let mut acc = ChunkResult {
                        grad: vec![0.0; n_params],
                        loss: 0.0,
                        correct: 0,
                    };
                    for &i in chunk {
                        let mut drop_rng = rng::stream(cfg.seed, &[TAG_DROPOUT, epoch as u64, i as u64]);
                        let (gamma, cache) =
                            forward_with_dropout(&params, &train_set.samples[i], cfg.keep_prob, &mut drop_rng)?;
                        let target = f64::from(train_set.labels[i]);
                        acc.loss += cross_entropy(gamma, target);
                        acc.correct += usize::from(u8::from(gamma >= 0.5) == train_set.labels[i]);
                        backward_into(&params, &cache, target, &mut acc.grad)?;
                    }
                    Ok(acc)
                })
                .collect::<Result<_>>()?;
            let mut grad = vec![0.0; n_params];
            for c in &chunks {
                for (g, x) in grad.iter_mut().zip(&c.grad) {
                    *g += x;
                }
                loss_sum += c.loss;
                correct += c.correct;
            }
            let scale = 1.0 / batch.len() as f64;
            grad.iter_mut().for_each(|g| *g *= scale);
            adam_step(params.values_mut(), &grad, &mut adam, cfg.learning_rate)?;
        }
        let mean_loss = loss_sum / train_set.len() as f64;
        if !mean_loss.is_finite() {
            return Err(Error::Diverged { epoch, loss: mean_loss });
        }
        let valid_pa = if valid_set.is_empty() {
            f64::NAN
        } else {
            prediction_accuracy(&params, valid_set)?
        };
        let record = EpochRecord {
            epoch,
            mean_loss,
            train_pa: correct as f64 / train_set.len() as f64,
            valid_pa,
        };
        log::debug!(
            "epoch {epoch}: loss {mean_loss:.5} train PA {:.4} valid PA {valid_pa:.4}",
            record.train_pa
        );
        history.push(record);
        if cfg.checkpoint == Checkpoint::BestValidation && best.as_ref().is_none_or(|(pa, _)| valid_pa > *pa) {
            best = Some((valid_pa, params.clone()));
        }
    }
    let params = match best {
        Some((_, p)) => p,
        None => params,
    };
    Ok(TrainOutcome { params, history })
}
