//! Gradient attacks on the classifier (FGSM, PGD, C&W-L2) and on the
//! combined classifier-plus-detector model `G`.

use std::str::FromStr;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{argmax_first, Tape, Tensor, Var};
use crate::classifier::Classifier;
use crate::config::KvConfig;
use crate::detectors::{dkl_from_logits, dkl_scores, dkl_var_from_logits};
use crate::error::{Error, Result};
use crate::transforms::TransformSpec;

/// Additive mask that removes a logit from a max.
const MASKED: f64 = -1e30;

/// Something that produces differentiable logits for a `B×C×H×W` batch.
pub trait LogitModel: Sync {
    fn num_logits(&self) -> usize;
    fn bind(&self, tape: &mut Tape) -> Vec<Var>;
    fn logits_var(&self, tape: &mut Tape, params: &[Var], x: Var) -> Result<Var>;
    /// A class an untargeted attack must not land in (the detector class
    /// of `G`).
    fn excluded_class(&self) -> Option<usize> {
        None
    }
}

impl LogitModel for Classifier {
    fn num_logits(&self) -> usize {
        self.num_classes()
    }

    fn bind(&self, tape: &mut Tape) -> Vec<Var> {
        Classifier::bind(self, tape, false)
    }

    fn logits_var(&self, tape: &mut Tape, params: &[Var], x: Var) -> Result<Var> {
        self.forward(tape, x, params, None)
    }
}

/// Detector settings that `G` folds into its extra logit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectorSpec {
    pub transform: TransformSpec,
    pub temperature: f64,
    pub threshold: f64,
}

/// `N + 1`-class model: the base logits shifted by their maximum, plus
/// `s · (D_KL(x) − τ)` as the last logit.
///
/// Shifting every base logit by `max_i Z_i` leaves softmax and argmax
/// unchanged and makes the top base logit exactly `0`, so the last class
/// wins precisely when `D_KL > τ`. Ties go to the base class.
pub struct CombinedModelG<'a> {
    pub base: &'a Classifier,
    pub detector: DetectorSpec,
    pub scale: f64,
}

impl<'a> CombinedModelG<'a> {
    pub fn new(base: &'a Classifier, detector: DetectorSpec, scale: f64) -> Result<Self> {
        if !(scale > 0.0) || !scale.is_finite() {
            return Err(Error::invalid(format!("G scale must be positive, got {scale}")));
        }
        detector.transform.validate()?;
        if !(detector.temperature > 0.0) {
            return Err(Error::invalid("detector temperature must be positive"));
        }
        Ok(Self {
            base,
            detector,
            scale,
        })
    }

    pub fn detector_class(&self) -> usize {
        self.base.num_classes()
    }

    /// Eval-mode `G` logits for one image.
    pub fn logits(&self, image: &Tensor) -> Result<Vec<f64>> {
        let z = self.base.logits(image)?;
        let d = if self.detector.threshold == f64::INFINITY {
            0.0
        } else {
            let zt = self.base.logits(&self.detector.transform.apply(image)?)?;
            dkl_from_logits(&z, &zt, self.detector.temperature)?
        };
        Ok(combine_logits(&z, d, self.detector.threshold, self.scale))
    }

    pub fn predict(&self, image: &Tensor) -> Result<usize> {
        Ok(argmax_first(&self.logits(image)?))
    }
}

/// `[Z_1 − m, …, Z_N − m, s·(d − τ)]` with `m = max_i Z_i`.
pub fn combine_logits(z: &[f64], d: f64, threshold: f64, scale: f64) -> Vec<f64> {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = z.iter().map(|v| v - m).collect();
    out.push(extra_logit(d, threshold, scale));
    out
}

fn extra_logit(d: f64, threshold: f64, scale: f64) -> f64 {
    if threshold == f64::INFINITY {
        f64::NEG_INFINITY
    } else if threshold == f64::NEG_INFINITY {
        f64::INFINITY
    } else {
        scale * (d - threshold)
    }
}

impl LogitModel for CombinedModelG<'_> {
    fn num_logits(&self) -> usize {
        self.base.num_classes() + 1
    }

    fn bind(&self, tape: &mut Tape) -> Vec<Var> {
        self.base.bind(tape, false)
    }

    fn logits_var(&self, tape: &mut Tape, params: &[Var], x: Var) -> Result<Var> {
        let z = self.base.forward(tape, x, params, None)?;
        let batch = tape.shape(z)[0];
        let m = tape.max_last(z)?;
        let m = tape.reshape(m, &[batch, 1])?;
        let shifted = tape.sub(z, m)?;
        let extra = if self.detector.threshold.is_finite() {
            let xt = self.detector.transform.apply_var(tape, x)?;
            let zt = self.base.forward(tape, xt, params, None)?;
            let d = dkl_var_from_logits(tape, z, zt, self.detector.temperature)?;
            let d = tape.add_scalar(d, -self.detector.threshold)?;
            let d = tape.mul_scalar(d, self.scale)?;
            tape.reshape(d, &[batch, 1])?
        } else {
            let v = extra_logit(0.0, self.detector.threshold, self.scale);
            tape.constant(Tensor::full(&[batch, 1], v))
        };
        tape.concat_last(&[shifted, extra])
    }

    fn excluded_class(&self) -> Option<usize> {
        Some(self.detector_class())
    }
}

// ------------------------------------------------------------------ config

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttackKind {
    Fgsm,
    Pgd,
    Cw,
}

impl FromStr for AttackKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fgsm" => Ok(Self::Fgsm),
            "pgd" => Ok(Self::Pgd),
            "cw" => Ok(Self::Cw),
            other => Err(Error::invalid(format!("unknown attack kind '{other}'"))),
        }
    }
}

impl std::fmt::Display for AttackKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Fgsm => "fgsm",
            Self::Pgd => "pgd",
            Self::Cw => "cw",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    pub kind: AttackKind,
    pub targeted: bool,
    /// Fixed target class; `None` with `targeted` draws a random wrong
    /// label per image from `seed`.
    pub target: Option<usize>,
    /// C&W confidence `k`.
    pub confidence: f64,
    /// FGSM/PGD L∞ radius on the `[0, 1]` scale.
    pub epsilon: f64,
    /// PGD step.
    pub step: f64,
    /// PGD iterations, or C&W iterations per binary-search step.
    pub iterations: usize,
    pub random_start: bool,
    pub binary_search_steps: usize,
    pub initial_c: f64,
    pub max_c: f64,
    /// C&W Adam step size.
    pub lr: f64,
    pub abort_early: bool,
    /// Images optimized together on one tape.
    pub batch: usize,
    pub seed: u64,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            kind: AttackKind::Cw,
            targeted: true,
            target: None,
            confidence: 0.0,
            epsilon: 0.05,
            step: 0.01,
            iterations: 1000,
            random_start: false,
            binary_search_steps: 9,
            initial_c: 1e-3,
            max_c: 1e10,
            lr: 0.01,
            abort_early: true,
            batch: 25,
            seed: 0,
        }
    }
}

impl AttackConfig {
    pub fn pgd(epsilon: f64, step: f64, iterations: usize) -> Self {
        Self {
            kind: AttackKind::Pgd,
            targeted: false,
            epsilon,
            step,
            iterations,
            ..Self::default()
        }
    }

    pub fn from_config(cfg: &KvConfig) -> Result<Self> {
        let d = Self::default();
        let kind: AttackKind = match cfg.get_str("attack_kind").or(cfg.get_str("kind")) {
            Some(s) => s.parse()?,
            None => d.kind,
        };
        let iterations = cfg.get_or(
            "iterations",
            if kind == AttackKind::Pgd { 20 } else { d.iterations },
        )?;
        Ok(Self {
            kind,
            targeted: cfg.get_or("targeted", d.targeted)?,
            target: cfg.get("target")?,
            confidence: cfg.get_or("k", d.confidence)?,
            epsilon: cfg.get_or("epsilon", d.epsilon)?,
            step: cfg.get_or("step", d.step)?,
            iterations,
            random_start: cfg.get_or("random_start", d.random_start)?,
            binary_search_steps: cfg.get_or("binary_search_steps", d.binary_search_steps)?,
            initial_c: cfg.get_or("initial_c", d.initial_c)?,
            max_c: cfg.get_or("max_c", d.max_c)?,
            lr: cfg.get_or("attack_lr", d.lr)?,
            abort_early: cfg.get_or("abort_early", d.abort_early)?,
            batch: cfg.get_or("attack_batch", d.batch)?,
            seed: cfg.get_or("seed", d.seed)?,
        })
    }

    fn validate(&self) -> Result<()> {
        if !(self.confidence >= 0.0) {
            return Err(Error::invalid(format!("confidence k must be ≥ 0, got {}", self.confidence)));
        }
        match self.kind {
            AttackKind::Fgsm if !(self.epsilon >= 0.0) => {
                Err(Error::invalid(format!("epsilon must be ≥ 0, got {}", self.epsilon)))
            }
            AttackKind::Pgd if !(self.epsilon >= 0.0 && self.step > 0.0 && self.step <= self.epsilon + 1e-15) => {
                Err(Error::invalid(format!(
                    "PGD needs 0 < step ≤ epsilon, got step {} epsilon {}",
                    self.step, self.epsilon
                )))
            }
            AttackKind::Cw if self.binary_search_steps == 0 || !(self.initial_c > 0.0) || !(self.lr > 0.0) => {
                Err(Error::invalid("C&W needs ≥ 1 search step, c > 0 and lr > 0"))
            }
            _ if self.batch == 0 => Err(Error::invalid("attack batch must be positive")),
            _ => Ok(()),
        }
    }
}

// ------------------------------------------------------------------ result

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackResult {
    pub id: u64,
    pub label: usize,
    pub target: Option<usize>,
    #[serde(skip)]
    pub adversarial: Option<Tensor>,
    /// Base classifier prediction on the adversarial image.
    pub predicted: usize,
    pub success: bool,
    /// `sqrt(mean((255·δ)²))`
    pub l2: f64,
    /// `255 · max|δ|`
    pub linf: f64,
    pub iterations: usize,
    /// Final C&W constant (C&W only).
    pub c: Option<f64>,
    /// Best objective value per binary-search step (C&W only).
    pub trace: Vec<f64>,
    /// Standalone detector score of the adversarial image (KD only).
    pub detector_score: Option<f64>,
}

/// Per-pixel L2 and L∞ distortion on the 0–255 scale.
pub fn distortion(original: &Tensor, adversarial: &Tensor) -> Result<(f64, f64)> {
    if original.shape() != adversarial.shape() {
        return Err(Error::ShapeMismatch {
            op: "distortion",
            lhs: original.shape().to_vec(),
            rhs: adversarial.shape().to_vec(),
        });
    }
    let n = original.len() as f64;
    let mut sq = 0.0;
    let mut max = 0.0f64;
    for (a, b) in original.data().iter().zip(adversarial.data()) {
        let d = 255.0 * (b - a);
        sq += d * d;
        max = max.max(d.abs());
    }
    Ok(((sq / n).sqrt(), max))
}

/// One random wrong label per image.
pub fn random_targets(labels: &[usize], num_classes: usize, seed: u64) -> Result<Vec<usize>> {
    if num_classes < 2 {
        return Err(Error::invalid("targeted attacks need at least 2 classes"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7a67_e75e);
    Ok(labels
        .iter()
        .map(|&y| {
            let choices: Vec<usize> = (0..num_classes).filter(|&c| c != y).collect();
            *choices.choose(&mut rng).expect("at least one other class")
        })
        .collect())
}

fn resolve_targets(cfg: &AttackConfig, labels: &[usize], num_classes: usize) -> Result<Option<Vec<usize>>> {
    if !cfg.targeted {
        return Ok(None);
    }
    match cfg.target {
        Some(t) => {
            if t >= num_classes {
                return Err(Error::invalid(format!("target {t} ≥ {num_classes} classes")));
            }
            if labels.contains(&t) {
                return Err(Error::invalid(format!("target {t} equals the true label of an attacked image")));
            }
            Ok(Some(vec![t; labels.len()]))
        }
        None => random_targets(labels, num_classes, cfg.seed).map(Some),
    }
}

/// Runs the configured attack against the classifier.
pub fn run_attack(
    model: &Classifier,
    images: &[&Tensor],
    labels: &[usize],
    ids: &[u64],
    cfg: &AttackConfig,
) -> Result<Vec<AttackResult>> {
    cfg.validate()?;
    check_lengths(images, labels, ids)?;
    let targets = resolve_targets(cfg, labels, model.num_classes())?;
    match cfg.kind {
        AttackKind::Fgsm => {
            if cfg.targeted {
                return Err(Error::invalid("FGSM is untargeted"));
            }
            fgsm(model, images, labels, ids, cfg.epsilon)
        }
        AttackKind::Pgd => pgd(model, images, labels, ids, targets.as_deref(), cfg),
        AttackKind::Cw => cw_attack(model, images, labels, ids, targets.as_deref(), cfg),
    }
}

fn check_lengths(images: &[&Tensor], labels: &[usize], ids: &[u64]) -> Result<()> {
    if images.len() != labels.len() || images.len() != ids.len() {
        return Err(Error::invalid(format!(
            "{} images, {} labels, {} ids",
            images.len(),
            labels.len(),
            ids.len()
        )));
    }
    Ok(())
}

// -------------------------------------------------------------- FGSM / PGD

/// Gradient of the summed cross-entropy w.r.t. the input batch.
fn ce_input_grad(model: &Classifier, batch: &Tensor, classes: &[usize]) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let params = model.bind(&mut tape, false);
    let x = tape.leaf(batch.clone().with_requires_grad(true));
    let z = model.forward(&mut tape, x, &params, None)?;
    let logp = tape.log_softmax(z)?;
    let picked = tape.pick(logp, classes)?;
    let total = tape.sum(picked)?;
    let loss = tape.neg(total)?;
    tape.backward(loss)?;
    Ok(tape.grad(x).expect("input gradient").to_vec())
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn finish_simple(
    model: &Classifier,
    images: &[&Tensor],
    labels: &[usize],
    ids: &[u64],
    targets: Option<&[usize]>,
    adv: Vec<Tensor>,
    iterations: usize,
) -> Result<Vec<AttackResult>> {
    let refs: Vec<&Tensor> = adv.iter().collect();
    let preds = model.predict_batch(&refs)?;
    let mut out = Vec::with_capacity(adv.len());
    for (i, a) in adv.into_iter().enumerate() {
        let (l2, linf) = distortion(images[i], &a)?;
        let success = match targets {
            Some(t) => preds[i] == t[i],
            None => preds[i] != labels[i],
        };
        out.push(AttackResult {
            id: ids[i],
            label: labels[i],
            target: targets.map(|t| t[i]),
            adversarial: Some(a),
            predicted: preds[i],
            success,
            l2,
            linf,
            iterations,
            c: None,
            trace: Vec::new(),
            detector_score: None,
        });
    }
    Ok(out)
}

/// `x' = clamp(x + ε · sign(∇_x CE(F(x), y)))`.
pub fn fgsm(model: &Classifier, images: &[&Tensor], labels: &[usize], ids: &[u64], epsilon: f64) -> Result<Vec<AttackResult>> {
    check_lengths(images, labels, ids)?;
    let adv = images
        .chunks(EVAL_BATCH)
        .zip(labels.chunks(EVAL_BATCH))
        .map(|(xs, ys)| {
            let batch = Tensor::stack(xs)?;
            let g = ce_input_grad(model, &batch, ys)?;
            let data: Vec<f64> = batch
                .data()
                .iter()
                .zip(&g)
                .map(|(x, gi)| (x + epsilon * sign(*gi)).clamp(0.0, 1.0))
                .collect();
            unstack(Tensor::new(batch.shape().to_vec(), data)?)
        })
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .flatten()
        .collect();
    finish_simple(model, images, labels, ids, None, adv, 1)
}

const EVAL_BATCH: usize = 64;

fn unstack(batch: Tensor) -> Result<Vec<Tensor>> {
    (0..batch.shape()[0]).map(|i| batch.slice_first(i)).collect()
}

/// Signed-gradient steps projected onto the L∞ ball of radius `ε` and the
/// `[0, 1]` box. Targeted runs descend the target-class cross-entropy.
pub fn pgd(
    model: &Classifier,
    images: &[&Tensor],
    labels: &[usize],
    ids: &[u64],
    targets: Option<&[usize]>,
    cfg: &AttackConfig,
) -> Result<Vec<AttackResult>> {
    check_lengths(images, labels, ids)?;
    let (eps, alpha) = (cfg.epsilon, cfg.step);
    let mut adv = Vec::with_capacity(images.len());
    for (chunk, xs) in images.chunks(EVAL_BATCH).enumerate() {
        let lo = chunk * EVAL_BATCH;
        let classes: Vec<usize> = match targets {
            Some(t) => t[lo..lo + xs.len()].to_vec(),
            None => labels[lo..lo + xs.len()].to_vec(),
        };
        let direction = if targets.is_some() { -1.0 } else { 1.0 };
        let orig = Tensor::stack(xs)?;
        let mut cur = orig.clone();
        if cfg.random_start {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(chunk as u64));
            for (c, o) in cur.data_mut().iter_mut().zip(orig.data()) {
                *c = (o + rng.random_range(-eps..=eps)).clamp(0.0, 1.0);
            }
        }
        for _ in 0..cfg.iterations {
            let g = ce_input_grad(model, &cur, &classes)?;
            for ((c, o), gi) in cur.data_mut().iter_mut().zip(orig.data()).zip(&g) {
                let stepped = *c + direction * alpha * sign(*gi);
                *c = stepped.clamp(o - eps, o + eps).clamp(0.0, 1.0);
            }
        }
        adv.extend(unstack(cur)?);
    }
    finish_simple(model, images, labels, ids, targets, adv, cfg.iterations)
}

// -------------------------------------------------------------------- C&W

/// Which logits count as the goal of the attack for one image.
#[derive(Clone, Debug)]
struct Goal {
    good: Vec<bool>,
}

impl Goal {
    fn new(num_logits: usize, label: usize, target: Option<usize>, excluded: Option<usize>) -> Self {
        let good = (0..num_logits)
            .map(|c| match target {
                Some(t) => c == t,
                None => c != label && Some(c) != excluded,
            })
            .collect();
        Self { good }
    }

    /// `max_good Z − max_bad Z`, or `None` when the logits are not finite
    /// enough to decide.
    fn margin(&self, z: &[f64]) -> Option<f64> {
        if z.iter().any(|v| v.is_nan()) {
            return None;
        }
        let mut good = f64::NEG_INFINITY;
        let mut bad = f64::NEG_INFINITY;
        for (v, &g) in z.iter().zip(&self.good) {
            if g {
                good = good.max(*v);
            } else {
                bad = bad.max(*v);
            }
        }
        Some(good - bad)
    }

    fn satisfied(&self, z: &[f64], k: f64) -> bool {
        match self.margin(z) {
            Some(m) => self.good[argmax_first(z)] && m >= k,
            None => false,
        }
    }
}

struct CwOutcome {
    adversarial: Option<Vec<f64>>,
    best_l2: f64,
    c: f64,
    iterations: usize,
    trace: Vec<f64>,
}

/// Carlini–Wagner L2 attack with a tanh change of variables, Adam, and a
/// binary search over the trade-off constant `c`.
pub fn cw_l2<M: LogitModel>(
    model: &M,
    images: &[&Tensor],
    labels: &[usize],
    ids: &[u64],
    targets: Option<&[usize]>,
    cfg: &AttackConfig,
) -> Result<Vec<AttackResult>> {
    check_lengths(images, labels, ids)?;
    cfg.validate()?;
    let goals: Vec<Goal> = (0..images.len())
        .map(|i| Goal::new(model.num_logits(), labels[i], targets.map(|t| t[i]), model.excluded_class()))
        .collect();
    let idx: Vec<usize> = (0..images.len()).collect();
    let outcomes: Vec<Result<Vec<CwOutcome>>> = idx
        .par_chunks(cfg.batch)
        .map(|chunk| {
            let xs: Vec<&Tensor> = chunk.iter().map(|&i| images[i]).collect();
            let gs: Vec<&Goal> = chunk.iter().map(|&i| &goals[i]).collect();
            cw_chunk(model, &xs, &gs, cfg)
        })
        .collect();
    let mut flat = Vec::with_capacity(images.len());
    for o in outcomes {
        flat.extend(o?);
    }
    let mut results = Vec::with_capacity(images.len());
    for (i, o) in flat.into_iter().enumerate() {
        let success = o.adversarial.is_some();
        let adv = match o.adversarial {
            Some(v) => Tensor::new(images[i].shape().to_vec(), v)?,
            None => images[i].clone(),
        };
        let (l2, linf) = distortion(images[i], &adv)?;
        debug_assert!(!success || (l2 - 255.0 * (o.best_l2 / images[i].len() as f64).sqrt()).abs() < 1e-6);
        results.push(AttackResult {
            id: ids[i],
            label: labels[i],
            target: targets.map(|t| t[i]),
            adversarial: Some(adv),
            predicted: 0,
            success,
            l2,
            linf,
            iterations: o.iterations,
            c: Some(o.c),
            trace: o.trace,
            detector_score: None,
        });
    }
    Ok(results)
}

fn cw_chunk<M: LogitModel>(model: &M, xs: &[&Tensor], goals: &[&Goal], cfg: &AttackConfig) -> Result<Vec<CwOutcome>> {
    let b = xs.len();
    let orig = Tensor::stack(xs)?;
    let shape = orig.shape().to_vec();
    let per = orig.len() / b;
    let k = model.num_logits();

    let mut outcomes: Vec<CwOutcome> = (0..b)
        .map(|_| CwOutcome {
            adversarial: None,
            best_l2: f64::INFINITY,
            c: cfg.initial_c,
            iterations: 0,
            trace: Vec::new(),
        })
        .collect();

    // images that already satisfy the goal need no perturbation
    let mut done = vec![false; b];
    {
        let mut tape = Tape::new();
        let params = model.bind(&mut tape);
        let x = tape.constant(orig.clone());
        let z = model.logits_var(&mut tape, &params, x)?;
        for i in 0..b {
            if goals[i].satisfied(&tape.value(z)[i * k..(i + 1) * k], cfg.confidence) {
                outcomes[i].adversarial = Some(xs[i].data().to_vec());
                outcomes[i].best_l2 = 0.0;
                done[i] = true;
            }
        }
    }
    if done.iter().all(|&d| d) {
        return Ok(outcomes);
    }

    let w0: Vec<f64> = orig
        .data()
        .iter()
        .map(|&v| ((2.0 * v - 1.0) * (1.0 - 1e-6)).atanh())
        .collect();
    let mut good_mask = vec![0.0; b * k];
    let mut bad_mask = vec![0.0; b * k];
    for i in 0..b {
        for c in 0..k {
            if goals[i].good[c] {
                bad_mask[i * k + c] = MASKED;
            } else {
                good_mask[i * k + c] = MASKED;
            }
        }
    }
    let mut c = vec![cfg.initial_c; b];
    let mut lower = vec![0.0; b];
    let mut upper = vec![cfg.max_c; b];
    let check_every = (cfg.iterations / 10).max(1);
    let mut tape = Tape::new();

    for _step in 0..cfg.binary_search_steps {
        let mut w = w0.clone();
        let mut m1 = vec![0.0; w.len()];
        let mut m2 = vec![0.0; w.len()];
        let mut active: Vec<bool> = done.iter().map(|d| !d).collect();
        let mut step_success = vec![false; b];
        let mut prev = vec![f64::INFINITY; b];
        let mut best_obj = vec![f64::INFINITY; b];
        for it in 0..cfg.iterations {
            if !active.iter().any(|&a| a) {
                break;
            }
            tape.reset();
            let params = model.bind(&mut tape);
            let wv = tape.leaf(Tensor::new(shape.clone(), w.clone())?.with_requires_grad(true));
            let th = tape.tanh(wv)?;
            let half = tape.mul_scalar(th, 0.5)?;
            let xa = tape.add_scalar(half, 0.5)?;
            let x0 = tape.constant(orig.clone());
            let diff = tape.sub(xa, x0)?;
            let sq = tape.mul(diff, diff)?;
            let sq = tape.reshape(sq, &[b, per])?;
            let l2 = tape.sum_axis(sq, 1)?;
            let l2 = tape.reshape(l2, &[b])?;
            let z = model.logits_var(&mut tape, &params, xa)?;
            let gm = tape.constant(Tensor::new(vec![b, k], good_mask.clone())?);
            let bm = tape.constant(Tensor::new(vec![b, k], bad_mask.clone())?);
            let zg = tape.add(z, gm)?;
            let zb = tape.add(z, bm)?;
            let good = tape.max_last(zg)?;
            let bad = tape.max_last(zb)?;
            let gap = tape.sub(bad, good)?;
            let f = tape.max_scalar(gap, -cfg.confidence)?;
            let cv = tape.constant(Tensor::from_vec(c.clone()));
            let cf = tape.mul(cv, f)?;
            let obj = tape.add(l2, cf)?;
            let total = tape.sum(obj)?;

            let zs = tape.value(z).to_vec();
            let l2s = tape.value(l2).to_vec();
            let objs = tape.value(obj).to_vec();
            let xas = tape.value(xa).to_vec();
            for i in 0..b {
                if !active[i] {
                    continue;
                }
                outcomes[i].iterations += 1;
                if !objs[i].is_finite() {
                    active[i] = false;
                    continue;
                }
                best_obj[i] = best_obj[i].min(objs[i]);
                if goals[i].satisfied(&zs[i * k..(i + 1) * k], cfg.confidence) {
                    step_success[i] = true;
                    if l2s[i] < outcomes[i].best_l2 {
                        outcomes[i].best_l2 = l2s[i];
                        outcomes[i].adversarial = Some(xas[i * per..(i + 1) * per].to_vec());
                    }
                }
                if cfg.abort_early && (it + 1) % check_every == 0 {
                    if objs[i] > prev[i] * 0.9999 {
                        active[i] = false;
                        continue;
                    }
                    prev[i] = objs[i];
                }
            }
            tape.backward(total)?;
            let g = tape.grad(wv).expect("perturbation gradient");
            let t = (it + 1) as i32;
            let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8);
            let (bc1, bc2) = (1.0 - b1.powi(t), 1.0 - b2.powi(t));
            for i in 0..b {
                if !active[i] {
                    continue;
                }
                for j in i * per..(i + 1) * per {
                    m1[j] = b1 * m1[j] + (1.0 - b1) * g[j];
                    m2[j] = b2 * m2[j] + (1.0 - b2) * g[j] * g[j];
                    w[j] -= cfg.lr * (m1[j] / bc1) / ((m2[j] / bc2).sqrt() + eps);
                }
            }
        }
        for i in 0..b {
            if done[i] {
                continue;
            }
            outcomes[i].trace.push(best_obj[i]);
            if step_success[i] {
                upper[i] = upper[i].min(c[i]);
                c[i] = (lower[i] + upper[i]) / 2.0;
            } else {
                lower[i] = lower[i].max(c[i]);
                c[i] = if upper[i] < cfg.max_c {
                    (lower[i] + upper[i]) / 2.0
                } else {
                    (c[i] * 10.0).min(cfg.max_c)
                };
            }
            outcomes[i].c = c[i];
        }
    }
    Ok(outcomes)
}

/// C&W on the base classifier; fills in base-model predictions.
pub fn cw_attack(
    model: &Classifier,
    images: &[&Tensor],
    labels: &[usize],
    ids: &[u64],
    targets: Option<&[usize]>,
    cfg: &AttackConfig,
) -> Result<Vec<AttackResult>> {
    let mut results = cw_l2(model, images, labels, ids, targets, cfg)?;
    fill_predictions(model, &mut results)?;
    Ok(results)
}

fn fill_predictions(model: &Classifier, results: &mut [AttackResult]) -> Result<()> {
    let advs: Vec<&Tensor> = results
        .iter()
        .map(|r| r.adversarial.as_ref().expect("adversarial image"))
        .collect();
    let preds = model.predict_batch(&advs)?;
    for (r, p) in results.iter_mut().zip(preds) {
        r.predicted = p;
    }
    Ok(())
}

/// Known-detector attack: C&W on `G`, then success re-checked with the
/// standalone detector (`F` predicts the target and `D_KL < τ`).
pub fn kd_attack(
    g: &CombinedModelG<'_>,
    images: &[&Tensor],
    labels: &[usize],
    ids: &[u64],
    targets: Option<&[usize]>,
    cfg: &AttackConfig,
) -> Result<Vec<AttackResult>> {
    if let Some(t) = targets {
        if t.iter().any(|&c| c >= g.base.num_classes()) {
            return Err(Error::invalid("KD targets must be base classes"));
        }
    }
    let mut results = cw_l2(g, images, labels, ids, targets, cfg)?;
    fill_predictions(g.base, &mut results)?;
    let advs: Vec<&Tensor> = results
        .iter()
        .map(|r| r.adversarial.as_ref().expect("adversarial image"))
        .collect();
    let scores = dkl_scores(g.base, &advs, &g.detector.transform, g.detector.temperature)?;
    for (r, s) in results.iter_mut().zip(scores) {
        r.detector_score = Some(s);
        let fooled = match r.target {
            Some(t) => r.predicted == t,
            None => r.predicted != r.label,
        };
        r.success = r.success && fooled && s < g.detector.threshold;
    }
    Ok(results)
}
