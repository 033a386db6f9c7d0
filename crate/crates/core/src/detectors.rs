//! Error-detection scores and threshold calibration.
//!
//! Every score grows with suspicion, so a single ROC routine and a single
//! `score > τ` reject rule serve all detectors.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::classifier::{softmax_t, Classifier, DEFAULT_DROPOUT_PASSES};
use crate::error::{Error, Result};
use crate::transforms::TransformSpec;

/// Floor applied to `q` before taking its logarithm.
pub const KL_FLOOR: f64 = 1e-12;

pub const DEFAULT_TARGET_FPR: f64 = 0.01;

/// Temperature used for UD detection.
pub const DEFAULT_TEMPERATURE: f64 = 1.0;

/// `Σ p_c ln(p_c / max(q_c, 1e-12))` in nats; terms with `p_c = 0` vanish.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::ShapeMismatch {
            op: "kl_divergence",
            lhs: vec![p.len()],
            rhs: vec![q.len()],
        });
    }
    Ok(p
        .iter()
        .zip(q)
        .filter(|(&pc, _)| pc > 0.0)
        .map(|(&pc, &qc)| pc * (pc / qc.max(KL_FLOOR)).ln())
        .sum::<f64>()
        .max(0.0))
}

/// D_KL between `softmax_T(z)` and `softmax_T(zt)`.
pub fn dkl_from_logits(z: &[f64], zt: &[f64], temperature: f64) -> Result<f64> {
    let p = softmax_t(z, temperature)?;
    let q = softmax_t(zt, temperature)?;
    kl_divergence(&p.probs, &q.probs)
}

/// D_KL between the model's posteriors on `x` and on `t(x)`.
pub fn dkl_score(model: &Classifier, image: &Tensor, t: &TransformSpec, temperature: f64) -> Result<f64> {
    let z = model.logits(image)?;
    let zt = model.logits(&t.apply(image)?)?;
    dkl_from_logits(&z, &zt, temperature)
}

/// Eval-mode logits of `t(x)` for every image.
pub fn transformed_logits(model: &Classifier, images: &[&Tensor], t: &TransformSpec) -> Result<Vec<Vec<f64>>> {
    let moved: Vec<Tensor> = images.iter().map(|x| t.apply(x)).collect::<Result<_>>()?;
    let refs: Vec<&Tensor> = moved.iter().collect();
    model.logits_batch(&refs)
}

/// Batch form of [`dkl_score`].
pub fn dkl_scores(model: &Classifier, images: &[&Tensor], t: &TransformSpec, temperature: f64) -> Result<Vec<f64>> {
    let z = model.logits_batch(images)?;
    let zt = transformed_logits(model, images, t)?;
    z.iter()
        .zip(&zt)
        .map(|(a, b)| dkl_from_logits(a, b, temperature))
        .collect()
}

/// Differentiable D_KL for a `B×C×H×W` input; returns a length-`B` vector.
///
/// Both posteriors are formed as `log_softmax(Z / T)`; the floor on `q`
/// becomes `max(ln q, ln 1e-12)`, which matches [`kl_divergence`].
pub fn dkl_var(
    tape: &mut Tape,
    model: &Classifier,
    params: &[Var],
    x: Var,
    t: &TransformSpec,
    temperature: f64,
) -> Result<Var> {
    if !(temperature > 0.0) {
        return Err(Error::Domain {
            op: "dkl_var",
            msg: format!("temperature must be positive, got {temperature}"),
        });
    }
    let z = model.forward(tape, x, params, None)?;
    let xt = t.apply_var(tape, x)?;
    let zt = model.forward(tape, xt, params, None)?;
    dkl_var_from_logits(tape, z, zt, temperature)
}

pub(crate) fn dkl_var_from_logits(tape: &mut Tape, z: Var, zt: Var, temperature: f64) -> Result<Var> {
    let inv = 1.0 / temperature;
    let zs = tape.mul_scalar(z, inv)?;
    let zts = tape.mul_scalar(zt, inv)?;
    let logp = tape.log_softmax(zs)?;
    let logq = tape.log_softmax(zts)?;
    let logq = tape.max_scalar(logq, KL_FLOOR.ln())?;
    let p = tape.exp(logp)?;
    let diff = tape.sub(logp, logq)?;
    let terms = tape.mul(p, diff)?;
    let rank = tape.shape(terms).len();
    tape.sum_axis(terms, rank - 1)
}

/// Maximal-softmax-response baseline: `1 − max_c F_c(x)` at `T = 1`.
pub fn msr_from_logits(z: &[f64]) -> Result<f64> {
    Ok(1.0 - softmax_t(z, 1.0)?.max_prob())
}

pub fn msr_score(model: &Classifier, image: &Tensor) -> Result<f64> {
    msr_from_logits(&model.logits(image)?)
}

/// Mean over classes of the (population) variance of `K` stochastic
/// posteriors.
pub fn dropout_score(model: &Classifier, image: &Tensor, passes: usize, seed: u64) -> Result<f64> {
    let posts = model.stochastic_posteriors(image, passes, seed)?;
    let n = posts[0].probs.len();
    let k = posts.len() as f64;
    let mut total = 0.0;
    for c in 0..n {
        let anchor = posts[0].probs[c];
        let d: Vec<f64> = posts.iter().map(|p| p.probs[c] - anchor).collect();
        let mean = d.iter().sum::<f64>() / k;
        total += (d.iter().map(|v| v * v).sum::<f64>() / k - mean * mean).max(0.0);
    }
    Ok(total / n as f64)
}

pub fn default_dropout_passes() -> usize {
    DEFAULT_DROPOUT_PASSES
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregation {
    Mean,
    Max,
    /// Exactly one score is expected.
    Single,
}

impl std::str::FromStr for Aggregation {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean" => Ok(Self::Mean),
            "max" => Ok(Self::Max),
            "single" => Ok(Self::Single),
            other => Err(Error::invalid(format!("unknown aggregation '{other}'"))),
        }
    }
}

pub fn aggregate_scores(scores: &[f64], mode: Aggregation) -> Result<f64> {
    if scores.is_empty() {
        return Err(Error::invalid("cannot aggregate an empty score list"));
    }
    match mode {
        Aggregation::Mean => Ok(scores.iter().sum::<f64>() / scores.len() as f64),
        Aggregation::Max => Ok(scores.iter().copied().fold(f64::NEG_INFINITY, f64::max)),
        Aggregation::Single if scores.len() == 1 => Ok(scores[0]),
        Aggregation::Single => Err(Error::invalid(format!(
            "single aggregation given {} scores",
            scores.len()
        ))),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectorVerdict {
    pub score: f64,
    pub threshold: f64,
    pub reject: bool,
    pub transforms: Vec<TransformSpec>,
    pub temperature: f64,
}

impl DetectorVerdict {
    pub fn new(score: f64, threshold: f64, transforms: Vec<TransformSpec>, temperature: f64) -> Self {
        Self {
            score,
            threshold,
            reject: score > threshold,
            transforms,
            temperature,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationResult {
    /// `−∞` when every sample may be rejected.
    pub threshold: f64,
    pub achieved_fpr: f64,
    pub n: usize,
}

/// Picks the smallest observed score `τ` such that at most
/// `floor(target · n)` calibration scores exceed it.
pub fn calibrate_threshold(scores: &[f64], target_fpr: f64) -> Result<CalibrationResult> {
    if scores.is_empty() {
        return Err(Error::invalid("calibration needs at least one score"));
    }
    if !(0.0..=1.0).contains(&target_fpr) {
        return Err(Error::invalid(format!("target FPR {target_fpr} outside [0, 1]")));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::invalid("NaN calibration score"));
    }
    let n = scores.len();
    if (n as f64) * target_fpr < 1.0 {
        log::warn!("calibrating at FPR {target_fpr} with only {n} samples; τ will be the maximum score");
    }
    let allowed = (target_fpr * n as f64 + 1e-9).floor() as usize;
    if allowed >= n {
        return Ok(CalibrationResult {
            threshold: f64::NEG_INFINITY,
            achieved_fpr: 1.0,
            n,
        });
    }
    let mut sorted = scores.to_vec();
    sorted.sort_by(f64::total_cmp);
    let threshold = sorted[n - 1 - allowed];
    let above = scores.iter().filter(|&&s| s > threshold).count();
    Ok(CalibrationResult {
        threshold,
        achieved_fpr: above as f64 / n as f64,
        n,
    })
}
