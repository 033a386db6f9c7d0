//! ROC curves, AUROC, bypass rate and distortion summaries.

use serde::{Deserialize, Serialize};

use crate::attacks::AttackResult;
use crate::error::{Error, Result};

/// `(FPR, TPR)` points from `(0, 0)` to `(1, 1)`. Positives are the
/// samples that should be rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RocCurve {
    pub points: Vec<(f64, f64)>,
    /// Threshold behind each point after the first; a sample is called
    /// positive when `score ≥ threshold`.
    pub thresholds: Vec<f64>,
}

impl RocCurve {
    /// Trapezoidal area under the curve.
    pub fn area(&self) -> f64 {
        self.points
            .windows(2)
            .map(|w| (w[1].0 - w[0].0) * (w[1].1 + w[0].1) / 2.0)
            .sum()
    }
}

fn split_classes(scores: &[(f64, bool)]) -> Result<(usize, usize)> {
    if scores.iter().any(|(s, _)| s.is_nan()) {
        return Err(Error::invalid("NaN score in ROC input"));
    }
    let pos = scores.iter().filter(|(_, p)| *p).count();
    let neg = scores.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::invalid(format!(
            "ROC needs both classes, got {pos} positives and {neg} negatives"
        )));
    }
    Ok((pos, neg))
}

/// Threshold sweep over the unique scores, highest first.
pub fn roc_curve(scores: &[(f64, bool)]) -> Result<RocCurve> {
    let (pos, neg) = split_classes(scores)?;
    let mut sorted = scores.to_vec();
    sorted.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut points = vec![(0.0, 0.0)];
    let mut thresholds = Vec::new();
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < sorted.len() {
        let s = sorted[i].0;
        while i < sorted.len() && sorted[i].0 == s {
            if sorted[i].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push((fp as f64 / neg as f64, tp as f64 / pos as f64));
        thresholds.push(s);
    }
    Ok(RocCurve { points, thresholds })
}

/// Mann–Whitney estimate of `P(pos > neg) + ½ P(pos = neg)` via midranks.
pub fn mann_whitney_auroc(scores: &[(f64, bool)]) -> Result<f64> {
    let (pos, neg) = split_classes(scores)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].0.total_cmp(&scores[b].0));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j < order.len() && scores[order[j]].0 == scores[order[i]].0 {
            j += 1;
        }
        // ranks i+1..=j share their mean
        let mid = (i + 1 + j) as f64 / 2.0;
        rank_sum += mid * order[i..j].iter().filter(|&&k| scores[k].1).count() as f64;
        i = j;
    }
    let (p, n) = (pos as f64, neg as f64);
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

/// ROC curve plus AUROC. The AUROC is the rank statistic; the curve's
/// trapezoidal area agrees with it up to rounding.
pub fn roc_auroc(scores: &[(f64, bool)]) -> Result<(RocCurve, f64)> {
    Ok((roc_curve(scores)?, mann_whitney_auroc(scores)?))
}

/// Convenience form taking separate negative and positive score lists.
pub fn auroc_split(negatives: &[f64], positives: &[f64]) -> Result<f64> {
    let labeled: Vec<(f64, bool)> = negatives
        .iter()
        .map(|&s| (s, false))
        .chain(positives.iter().map(|&s| (s, true)))
        .collect();
    mann_whitney_auroc(&labeled)
}

/// Fraction of attack attempts that fool the classifier and score strictly
/// below `τ`. `scores[i]` is the detector score of `results[i]`'s image.
pub fn bypass_rate(results: &[AttackResult], scores: &[f64], threshold: f64) -> Result<f64> {
    if results.is_empty() {
        return Err(Error::invalid("bypass rate of an empty attack set"));
    }
    if results.len() != scores.len() {
        return Err(Error::invalid(format!(
            "{} attack results but {} scores",
            results.len(),
            scores.len()
        )));
    }
    let n = results
        .iter()
        .zip(scores)
        .filter(|(r, &s)| r.success && s < threshold)
        .count();
    Ok(n as f64 / results.len() as f64)
}

/// Mean and median of a sample; both `NaN` when it is empty.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub median: f64,
    pub n: usize,
}

pub fn summarize(values: &[f64]) -> Summary {
    if values.is_empty() {
        return Summary {
            mean: f64::NAN,
            median: f64::NAN,
            n: 0,
        };
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let median = if n % 2 == 1 {
        sorted[n / 2]
    } else {
        (sorted[n / 2 - 1] + sorted[n / 2]) / 2.0
    };
    Summary {
        mean: values.iter().sum::<f64>() / n as f64,
        median,
        n,
    }
}
