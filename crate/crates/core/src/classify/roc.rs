use serde::Serialize;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RocPoint {
    pub fpr: f64,
    pub tpr: f64,
    /// Scores `≥ threshold` are called positive (AD).
    pub threshold: f64,
}

/// ROC points from `(0, 0)` at threshold `+∞` to `(1, 1)`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RocCurve {
    pub points: Vec<RocPoint>,
}

fn class_sizes(labels: &[u8]) -> Result<(usize, usize)> {
    let pos = labels.iter().filter(|&&l| l == 1).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::SingleClass("ROC analysis"));
    }
    Ok((pos, neg))
}

/// Sweeps the threshold over the unique scores, highest first.
pub fn roc_curve(scores: &[f64], labels: &[u8]) -> Result<RocCurve> {
    if scores.len() != labels.len() {
        return Err(Error::Shape(format!("{} scores, {} labels", scores.len(), labels.len())));
    }
    let (pos, neg) = class_sizes(labels)?;
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut points = vec![RocPoint {
        fpr: 0.0,
        tpr: 0.0,
        threshold: f64::INFINITY,
    }];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < idx.len() {
        let t = scores[idx[i]];
        while i < idx.len() && scores[idx[i]] == t {
            if labels[idx[i]] == 1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push(RocPoint {
            fpr: fp as f64 / neg as f64,
            tpr: tp as f64 / pos as f64,
            threshold: t,
        });
    }
    Ok(RocCurve { points })
}

/// Trapezoidal area under the curve.
pub fn auc(curve: &RocCurve) -> f64 {
    curve
        .points
        .windows(2)
        .map(|w| (w[1].fpr - w[0].fpr) * 0.5 * (w[1].tpr + w[0].tpr))
        .sum()
}

/// Operating threshold maximising Youden's J = TPR − FPR.
///
/// The threshold sits midway between the chosen score and the next lower
/// unique score, so it generalises to scores not seen in the sweep. Ties in
/// J go to the higher threshold.
pub fn youden_threshold(scores: &[f64], labels: &[u8]) -> Result<f64> {
    let curve = roc_curve(scores, labels)?;
    let p = &curve.points;
    let mut best = 0;
    for i in 1..p.len() {
        if p[i].tpr - p[i].fpr > p[best].tpr - p[best].fpr {
            best = i;
        }
    }
    Ok(match (best, p.get(best + 1)) {
        (0, Some(next)) => next.threshold + 1.0_f64.max(next.threshold.abs()),
        (_, Some(next)) => 0.5 * (p[best].threshold + next.threshold),
        (_, None) => f64::NEG_INFINITY,
    })
}

/// Bhattacharyya coefficient `Σ √(p_i q_i)` of two samples histogrammed on
/// a shared range with `bins` equal bins.
pub fn bhattacharyya(a: &[f64], b: &[f64], bins: usize) -> Result<f64> {
    if a.is_empty() || b.is_empty() || bins == 0 {
        return Err(Error::Empty("Bhattacharyya coefficient"));
    }
    let lo = a.iter().chain(b).copied().fold(f64::INFINITY, f64::min);
    let hi = a.iter().chain(b).copied().fold(f64::NEG_INFINITY, f64::max);
    if hi == lo {
        return Ok(1.0);
    }
    let hist = |v: &[f64]| {
        let mut h = vec![0.0; bins];
        for &x in v {
            let k = (((x - lo) / (hi - lo)) * bins as f64) as usize;
            h[k.min(bins - 1)] += 1.0 / v.len() as f64;
        }
        h
    };
    let (ha, hb) = (hist(a), hist(b));
    Ok(ha.iter().zip(&hb).map(|(p, q)| (p * q).sqrt()).sum())
}
