//! Learned natural-error detector over jointly reordered logits.
//!
//! The feature for an image stacks the logits of `x` and of each `t_j(x)`,
//! all permuted by the descending order of `Z(x)` and truncated to `N′`
//! entries. A small MLP maps it to the probability that the classifier's
//! prediction on `x` is wrong.

use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{argmax_first, sigmoid, Checkpoint, Tape, Tensor, Var};
use crate::classifier::{hflip_tensor, Classifier};
use crate::config::KvConfig;
use crate::data::LabeledImage;
use crate::error::{Error, Result};
use crate::transforms::{default_mlp_transforms, parse_transform_list, TransformSpec};

const BN_EPS: f64 = 1e-5;
const BN_MOMENTUM: f64 = 0.1;

/// `+1` when the prediction is wrong, `−1` otherwise.
pub fn error_label(predicted: usize, label: usize) -> i8 {
    if predicted != label {
        1
    } else {
        -1
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct InvarianceFeature {
    pub values: Vec<f64>,
    pub image_id: u64,
    pub n_prime: usize,
}

/// Descending argsort; equal values keep their original order.
pub fn descending_order(z: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..z.len()).collect();
    idx.sort_by(|&a, &b| z[b].total_cmp(&z[a]));
    idx
}

/// Reorders `Z(x)` and every `Z(t_j(x))` by the descending order of
/// `Z(x)`, keeps the first `N′` entries of each and concatenates them,
/// original first.
pub fn build_feature(z: &[f64], transformed: &[Vec<f64>], n_prime: usize) -> Result<Vec<f64>> {
    if n_prime == 0 || n_prime > z.len() {
        return Err(Error::invalid(format!(
            "N′ = {n_prime} must lie in 1..={}",
            z.len()
        )));
    }
    if let Some(bad) = transformed.iter().find(|v| v.len() != z.len()) {
        return Err(Error::ShapeMismatch {
            op: "build_feature",
            lhs: vec![z.len()],
            rhs: vec![bad.len()],
        });
    }
    let order = descending_order(z);
    let mut out = Vec::with_capacity((transformed.len() + 1) * n_prime);
    for v in std::iter::once(z).chain(transformed.iter().map(Vec::as_slice)) {
        out.extend(order[..n_prime].iter().map(|&i| v[i]));
    }
    Ok(out)
}

/// `min(N, 5)`.
pub fn default_n_prime(num_classes: usize) -> usize {
    num_classes.min(5)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpConfig {
    pub hidden: usize,
    pub dropout: f64,
    /// Batch norm after the ReLU (`true`) or before it.
    pub bn_after_relu: bool,
    pub epochs: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// Random flip, brightness and contrast applied to each image before
    /// the fixed transforms, redrawn every epoch.
    pub augment: bool,
    pub transforms: Vec<TransformSpec>,
    /// `None` means `min(N, 5)`.
    pub n_prime: Option<usize>,
}

impl Default for MlpConfig {
    fn default() -> Self {
        Self {
            hidden: 30,
            dropout: 0.5,
            bn_after_relu: true,
            epochs: 50,
            lr: 0.01,
            momentum: 0.9,
            weight_decay: 1e-4,
            batch_size: 32,
            seed: 1,
            augment: true,
            transforms: default_mlp_transforms(),
            n_prime: None,
        }
    }
}

impl MlpConfig {
    pub fn from_config(cfg: &KvConfig) -> Result<Self> {
        let d = Self::default();
        Ok(Self {
            hidden: cfg.get_or("mlp_hidden", d.hidden)?,
            dropout: cfg.get_or("mlp_dropout", d.dropout)?,
            bn_after_relu: cfg.get_or("mlp_bn_after_relu", d.bn_after_relu)?,
            epochs: cfg.get_or("mlp_epochs", d.epochs)?,
            lr: cfg.get_or("mlp_lr", d.lr)?,
            momentum: cfg.get_or("mlp_momentum", d.momentum)?,
            weight_decay: cfg.get_or("mlp_weight_decay", d.weight_decay)?,
            batch_size: cfg.get_or("mlp_batch_size", d.batch_size)?,
            seed: cfg.get_or("seed", d.seed)?,
            augment: cfg.get_or("mlp_augment", d.augment)?,
            transforms: match cfg.get_str("mlp_transforms") {
                Some(s) => parse_transform_list(s)?,
                None => d.transforms,
            },
            n_prime: cfg.get("n_prime")?,
        })
    }
}

/// Serialized alongside the weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct MlpMeta {
    config: MlpConfig,
    input_dim: usize,
    n_prime: usize,
}

/// dense → ReLU → BN → dropout → dense → ReLU → BN → dropout → dense(1).
#[derive(Clone, Debug, PartialEq)]
pub struct MlpModel {
    config: MlpConfig,
    input_dim: usize,
    n_prime: usize,
    /// fc1.w, fc1.b, bn1.gamma, bn1.beta, fc2.w, fc2.b, bn2.gamma, bn2.beta,
    /// fc3.w, fc3.b
    params: Vec<Tensor>,
    /// bn1.mean, bn1.var, bn2.mean, bn2.var
    running: Vec<Vec<f64>>,
    input_mean: Vec<f64>,
    input_std: Vec<f64>,
}

const PARAM_NAMES: [&str; 10] = [
    "fc1.weight",
    "fc1.bias",
    "bn1.gamma",
    "bn1.beta",
    "fc2.weight",
    "fc2.bias",
    "bn2.gamma",
    "bn2.beta",
    "fc3.weight",
    "fc3.bias",
];
const RUNNING_NAMES: [&str; 4] = ["bn1.running_mean", "bn1.running_var", "bn2.running_mean", "bn2.running_var"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpTrainReport {
    pub epoch_losses: Vec<f64>,
    pub n_errors: usize,
    pub n_correct: usize,
}

impl MlpModel {
    pub fn new(config: MlpConfig, input_dim: usize, n_prime: usize) -> Result<Self> {
        if input_dim == 0 || config.hidden == 0 {
            return Err(Error::invalid("MLP dimensions must be positive"));
        }
        if !(0.0..1.0).contains(&config.dropout) {
            return Err(Error::invalid(format!("dropout rate {} outside [0, 1)", config.dropout)));
        }
        let h = config.hidden;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed);
        let mut dense = |fan_in: usize, fan_out: usize| {
            let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("valid std");
            Tensor::new(
                vec![fan_in, fan_out],
                (0..fan_in * fan_out).map(|_| normal.sample(&mut rng)).collect(),
            )
            .expect("shape matches")
        };
        let params = vec![
            dense(input_dim, h),
            Tensor::zeros(&[h]),
            Tensor::full(&[h], 1.0),
            Tensor::zeros(&[h]),
            dense(h, h),
            Tensor::zeros(&[h]),
            Tensor::full(&[h], 1.0),
            Tensor::zeros(&[h]),
            dense(h, 1),
            Tensor::zeros(&[1]),
        ];
        Ok(Self {
            config,
            input_dim,
            n_prime,
            params,
            running: vec![vec![0.0; h], vec![1.0; h], vec![0.0; h], vec![1.0; h]],
            input_mean: vec![0.0; input_dim],
            input_std: vec![1.0; input_dim],
        })
    }

    pub fn config(&self) -> &MlpConfig {
        &self.config
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn n_prime(&self) -> usize {
        self.n_prime
    }

    pub fn transforms(&self) -> &[TransformSpec] {
        &self.config.transforms
    }

    fn standardize(&self, f: &[f64]) -> Vec<f64> {
        f.iter()
            .zip(&self.input_mean)
            .zip(&self.input_std)
            .map(|((v, m), s)| (v - m) / s)
            .collect()
    }

    /// Output logits for a `B×D` standardized batch. In training mode
    /// (`rng` present) batch norm uses batch statistics and dropout is
    /// active; the batch statistics are returned for the running update.
    fn forward(
        &self,
        tape: &mut Tape,
        x: Var,
        params: &[Var],
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Result<(Var, Vec<Vec<f64>>)> {
        let batch = tape.shape(x)[0];
        let mut stats = Vec::new();
        let mut z = x;
        for layer in 0..2 {
            let (w, b, g, beta) = (params[4 * layer], params[4 * layer + 1], params[4 * layer + 2], params[4 * layer + 3]);
            z = tape.matmul(z, w)?;
            z = tape.add(z, b)?;
            if self.config.bn_after_relu {
                z = tape.relu(z)?;
            }
            z = if rng.is_some() {
                let mean = tape.mean_axis(z, 0)?;
                let centered = tape.sub(z, mean)?;
                let sq = tape.mul(centered, centered)?;
                let var = tape.mean_axis(sq, 0)?;
                stats.push(tape.value(mean).to_vec());
                stats.push(tape.value(var).to_vec());
                let ve = tape.add_scalar(var, BN_EPS)?;
                let inv = tape.pow_scalar(ve, -0.5)?;
                tape.mul(centered, inv)?
            } else {
                let mean = tape.constant(Tensor::from_vec(self.running[2 * layer].clone()));
                let inv: Vec<f64> = self.running[2 * layer + 1]
                    .iter()
                    .map(|v| 1.0 / (v + BN_EPS).sqrt())
                    .collect();
                let inv = tape.constant(Tensor::from_vec(inv));
                let centered = tape.sub(z, mean)?;
                tape.mul(centered, inv)?
            };
            z = tape.mul(z, g)?;
            z = tape.add(z, beta)?;
            if !self.config.bn_after_relu {
                z = tape.relu(z)?;
            }
            if let Some(r) = rng.as_deref_mut() {
                let p = self.config.dropout;
                if p > 0.0 {
                    let h = self.config.hidden;
                    let keep = 1.0 / (1.0 - p);
                    let mask: Vec<f64> = (0..batch * h)
                        .map(|_| if r.random::<f64>() < p { 0.0 } else { keep })
                        .collect();
                    let m = tape.constant(Tensor::new(vec![batch, h], mask)?);
                    z = tape.mul(z, m)?;
                }
            }
        }
        z = tape.matmul(z, params[8])?;
        z = tape.add(z, params[9])?;
        Ok((z, stats))
    }

    /// Raw output logit for one feature vector (eval mode).
    pub fn logit(&self, feature: &[f64]) -> Result<f64> {
        Ok(self.logits(&[feature.to_vec()])?[0])
    }

    pub fn logits(&self, features: &[Vec<f64>]) -> Result<Vec<f64>> {
        if let Some(bad) = features.iter().find(|f| f.len() != self.input_dim) {
            return Err(Error::ShapeMismatch {
                op: "mlp_score",
                lhs: vec![bad.len()],
                rhs: vec![self.input_dim],
            });
        }
        if features.is_empty() {
            return Ok(Vec::new());
        }
        let data: Vec<f64> = features.iter().flat_map(|f| self.standardize(f)).collect();
        let mut tape = Tape::new();
        let params: Vec<Var> = self.params.iter().map(|p| tape.constant(p.clone())).collect();
        let x = tape.constant(Tensor::new(vec![features.len(), self.input_dim], data)?);
        let (z, _) = self.forward(&mut tape, x, &params, None)?;
        Ok(tape.value(z).to_vec())
    }

    /// Probability that the classification is wrong.
    pub fn score(&self, feature: &[f64]) -> Result<f64> {
        Ok(sigmoid(self.logit(feature)?))
    }

    pub fn scores(&self, features: &[Vec<f64>]) -> Result<Vec<f64>> {
        Ok(self.logits(features)?.into_iter().map(sigmoid).collect())
    }

    /// Weighted binary cross-entropy training on fixed features; labels are
    /// `±1` error labels mapped to targets `{1, 0}`.
    pub fn train_on_features(features: &[Vec<f64>], labels: &[i8], config: MlpConfig) -> Result<(Self, MlpTrainReport)> {
        let dim = features.first().map(Vec::len).unwrap_or(0);
        let n_prime = config.n_prime.unwrap_or(dim);
        let mut model = Self::new(config, dim, n_prime)?;
        model.fit_standardization(features);
        let mut rng = ChaCha8Rng::seed_from_u64(model.config.seed);
        let mut state = SgdState::new(&model.params);
        let mut losses = Vec::new();
        for epoch in 0..model.config.epochs {
            losses.push(model.epoch(features, labels, &mut rng, &mut state, epoch)?);
        }
        let n_errors = labels.iter().filter(|&&l| l == 1).count();
        Ok((
            model,
            MlpTrainReport {
                epoch_losses: losses,
                n_errors,
                n_correct: labels.len() - n_errors,
            },
        ))
    }

    /// Trains on held-out labeled images, regenerating features every epoch
    /// from augmented copies when `config.augment` is set.
    pub fn train_on_images(classifier: &Classifier, images: &[&LabeledImage], config: MlpConfig) -> Result<(Self, MlpTrainReport)> {
        let n_prime = config.n_prime.unwrap_or_else(|| default_n_prime(classifier.num_classes()));
        let dim = (config.transforms.len() + 1) * n_prime;
        let mut model = Self::new(config, dim, n_prime)?;
        let clean: Vec<&Tensor> = images.iter().map(|im| &im.pixels).collect();
        let (features, labels) = features_and_labels(classifier, &clean, images, &model.config.transforms, n_prime)?;
        model.fit_standardization(&features);
        let n_errors = labels.iter().filter(|&&l| l == 1).count();
        let mut rng = ChaCha8Rng::seed_from_u64(model.config.seed);
        let mut state = SgdState::new(&model.params);
        let mut losses = Vec::new();
        for epoch in 0..model.config.epochs {
            let (f, l) = if model.config.augment {
                let aug: Vec<Tensor> = images.iter().map(|im| augment(&im.pixels, &mut rng)).collect::<Result<_>>()?;
                let refs: Vec<&Tensor> = aug.iter().collect();
                features_and_labels(classifier, &refs, images, &model.config.transforms, n_prime)?
            } else {
                (features.clone(), labels.clone())
            };
            losses.push(model.epoch(&f, &l, &mut rng, &mut state, epoch)?);
        }
        Ok((
            model,
            MlpTrainReport {
                epoch_losses: losses,
                n_errors,
                n_correct: labels.len() - n_errors,
            },
        ))
    }

    fn fit_standardization(&mut self, features: &[Vec<f64>]) {
        let n = features.len() as f64;
        for d in 0..self.input_dim {
            let mean = features.iter().map(|f| f[d]).sum::<f64>() / n;
            let var = features.iter().map(|f| (f[d] - mean).powi(2)).sum::<f64>() / n;
            self.input_mean[d] = mean;
            self.input_std[d] = var.sqrt().max(1e-6);
        }
    }

    fn epoch(
        &mut self,
        features: &[Vec<f64>],
        labels: &[i8],
        rng: &mut ChaCha8Rng,
        state: &mut SgdState,
        epoch: usize,
    ) -> Result<f64> {
        if features.len() != labels.len() {
            return Err(Error::invalid("feature and label counts differ"));
        }
        let n_pos = labels.iter().filter(|&&l| l == 1).count();
        let n_neg = labels.len() - n_pos;
        if n_pos == 0 || n_neg == 0 {
            return Err(Error::invalid(format!(
                "MLP training needs both classes, got {n_pos} errors and {n_neg} correct"
            )));
        }
        let (w_pos, w_neg) = class_weights(n_pos, n_neg);
        let mut order: Vec<usize> = (0..features.len()).collect();
        order.shuffle(rng);
        let (mut total, mut count) = (0.0, 0usize);
        let mut tape = Tape::new();
        for (step, idx) in order.chunks(self.config.batch_size.max(2)).enumerate() {
            if idx.len() < 2 {
                continue;
            }
            let data: Vec<f64> = idx.iter().flat_map(|&i| self.standardize(&features[i])).collect();
            tape.reset();
            let params: Vec<Var> = self.params.iter().map(|p| tape.param(p)).collect();
            let x = tape.constant(Tensor::new(vec![idx.len(), self.input_dim], data)?);
            let (z, stats) = self.forward(&mut tape, x, &params, Some(rng))?;
            // softplus(-z) for errors, softplus(z) for correct ones
            let sign: Vec<f64> = idx.iter().map(|&i| if labels[i] == 1 { -1.0 } else { 1.0 }).collect();
            let weights: Vec<f64> = idx.iter().map(|&i| if labels[i] == 1 { w_pos } else { w_neg }).collect();
            let wsum: f64 = weights.iter().sum();
            let s = tape.constant(Tensor::new(vec![idx.len(), 1], sign)?);
            let w = tape.constant(Tensor::new(vec![idx.len(), 1], weights.iter().map(|v| v / wsum).collect())?);
            let signed = tape.mul(z, s)?;
            let sp = tape.softplus(signed)?;
            let weighted = tape.mul(sp, w)?;
            let loss = tape.sum(weighted)?;
            let value = tape.scalar(loss);
            if !value.is_finite() {
                return Err(Error::Divergence { epoch, step, loss: value });
            }
            tape.backward(loss)?;
            let grads: Vec<Vec<f64>> = params.iter().map(|v| tape.grad(*v).expect("param grad").to_vec()).collect();
            state.step(&mut self.params, &grads, self.config.lr, self.config.momentum, self.config.weight_decay);
            let unbias = idx.len() as f64 / (idx.len() as f64 - 1.0);
            for (k, s) in stats.iter().enumerate() {
                let scale = if k % 2 == 1 { unbias } else { 1.0 };
                for (r, v) in self.running[k].iter_mut().zip(s) {
                    *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * v * scale;
                }
            }
            total += value * idx.len() as f64;
            count += idx.len();
        }
        Ok(total / count.max(1) as f64)
    }

    /// Feature for one image under this model's transforms and `N′`.
    pub fn feature_for(&self, classifier: &Classifier, image: &Tensor) -> Result<Vec<f64>> {
        let (f, _) = image_features(classifier, &[image], &self.config.transforms, self.n_prime)?;
        Ok(f.into_iter().next().expect("one feature"))
    }

    pub fn score_images(&self, classifier: &Classifier, images: &[&Tensor]) -> Result<Vec<f64>> {
        let (f, _) = image_features(classifier, images, &self.config.transforms, self.n_prime)?;
        self.scores(&f)
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let mut ck = Checkpoint::new();
        let meta = MlpMeta {
            config: self.config.clone(),
            input_dim: self.input_dim,
            n_prime: self.n_prime,
        };
        ck.push_bytes("__meta__", &serde_json::to_vec(&meta)?)?;
        for (name, p) in PARAM_NAMES.iter().zip(&self.params) {
            ck.push_tensor(name, p)?;
        }
        for (name, r) in RUNNING_NAMES.iter().zip(&self.running) {
            ck.push_tensor(name, &Tensor::from_vec(r.clone()))?;
        }
        ck.push_tensor("input.mean", &Tensor::from_vec(self.input_mean.clone()))?;
        ck.push_tensor("input.std", &Tensor::from_vec(self.input_std.clone()))?;
        Ok(ck)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let meta: MlpMeta = serde_json::from_slice(ck.bytes("__meta__")?)?;
        let mut model = Self::new(meta.config, meta.input_dim, meta.n_prime)?;
        for (name, p) in PARAM_NAMES.iter().zip(model.params.iter_mut()) {
            let t = ck.tensor(name)?;
            if t.shape() != p.shape() {
                return Err(Error::format("mlp checkpoint", format!("{name} has shape {:?}", t.shape())));
            }
            *p = t;
        }
        for (name, r) in RUNNING_NAMES.iter().zip(model.running.iter_mut()) {
            *r = ck.tensor(name)?.into_data();
        }
        model.input_mean = ck.tensor("input.mean")?.into_data();
        model.input_std = ck.tensor("input.std")?.into_data();
        if model.input_mean.len() != model.input_dim || model.input_std.len() != model.input_dim {
            return Err(Error::format("mlp checkpoint", "standardization length mismatch"));
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint()?.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}

/// Per-class loss weights inversely proportional to class frequency,
/// `(errors, correct)`.
pub fn class_weights(n_errors: usize, n_correct: usize) -> (f64, f64) {
    let n = (n_errors + n_correct) as f64;
    (n / (2.0 * n_errors as f64), n / (2.0 * n_correct as f64))
}

struct SgdState {
    velocity: Vec<Vec<f64>>,
}

impl SgdState {
    fn new(params: &[Tensor]) -> Self {
        Self {
            velocity: params.iter().map(|p| vec![0.0; p.len()]).collect(),
        }
    }

    fn step(&mut self, params: &mut [Tensor], grads: &[Vec<f64>], lr: f64, momentum: f64, wd: f64) {
        for ((p, v), g) in params.iter_mut().zip(&mut self.velocity).zip(grads) {
            for ((w, vel), &gi) in p.data_mut().iter_mut().zip(v.iter_mut()).zip(g) {
                *vel = momentum * *vel + gi + wd * *w;
                *w -= lr * *vel;
            }
        }
    }
}

/// Random horizontal flip, brightness in `[-0.1, 0.1]` and contrast in
/// `[0.8, 1.2]`.
pub fn augment(image: &Tensor, rng: &mut ChaCha8Rng) -> Result<Tensor> {
    let mut x = if rng.random::<bool>() {
        hflip_tensor(image)
    } else {
        image.clone()
    };
    x = TransformSpec::Brightness(rng.random_range(-0.1..=0.1)).apply(&x)?;
    TransformSpec::Contrast(rng.random_range(0.8..=1.2)).apply(&x)
}

/// Features for each image plus the classifier's predictions on it.
pub fn image_features(
    classifier: &Classifier,
    images: &[&Tensor],
    transforms: &[TransformSpec],
    n_prime: usize,
) -> Result<(Vec<Vec<f64>>, Vec<usize>)> {
    let z = classifier.logits_batch(images)?;
    let zts: Vec<Vec<Vec<f64>>> = transforms
        .iter()
        .map(|t| crate::detectors::transformed_logits(classifier, images, t))
        .collect::<Result<_>>()?;
    let mut features = Vec::with_capacity(images.len());
    for (i, zi) in z.iter().enumerate() {
        let moved: Vec<Vec<f64>> = zts.iter().map(|zt| zt[i].clone()).collect();
        features.push(build_feature(zi, &moved, n_prime)?);
    }
    let preds = z.iter().map(|zi| argmax_first(zi)).collect();
    Ok((features, preds))
}

fn features_and_labels(
    classifier: &Classifier,
    pixels: &[&Tensor],
    images: &[&LabeledImage],
    transforms: &[TransformSpec],
    n_prime: usize,
) -> Result<(Vec<Vec<f64>>, Vec<i8>)> {
    let (features, preds) = image_features(classifier, pixels, transforms, n_prime)?;
    let labels = preds.iter().zip(images).map(|(&p, im)| error_label(p, im.label)).collect();
    Ok((features, labels))
}

/// Writes `id,error_label,f0,f1,...` rows.
pub fn write_features_csv(path: &Path, ids: &[u64], labels: &[i8], features: &[Vec<f64>]) -> Result<()> {
    let mut out = String::new();
    let dim = features.first().map(Vec::len).unwrap_or(0);
    out.push_str("id,error_label");
    for d in 0..dim {
        out.push_str(&format!(",f{d}"));
    }
    out.push('\n');
    for ((id, l), f) in ids.iter().zip(labels).zip(features) {
        out.push_str(&format!("{id},{l}"));
        for v in f {
            out.push_str(&format!(",{v}"));
        }
        out.push('\n');
    }
    let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn feature_example() {
        let f = build_feature(&[1.0, 3.0, 2.0], &[vec![0.5, 2.5, 2.0]], 2).unwrap();
        assert_eq!(f, vec![3.0, 2.0, 2.5, 2.0]);
        assert_eq!(build_feature(&[1.0, 3.0, 2.0], &[], 2).unwrap(), vec![3.0, 2.0]);
        assert!(build_feature(&[1.0, 3.0], &[], 3).is_err());
        assert!(build_feature(&[1.0, 3.0], &[vec![1.0]], 2).is_err());
    }

    #[test]
    fn feature_ignores_class_relabeling() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..100 {
            let z: Vec<f64> = (0..6).map(|_| rng.random_range(-3.0..3.0)).collect();
            let zt: Vec<Vec<f64>> = (0..3).map(|_| (0..6).map(|_| rng.random_range(-3.0..3.0)).collect()).collect();
            let mut perm: Vec<usize> = (0..6).collect();
            perm.shuffle(&mut rng);
            let relabel = |v: &[f64]| perm.iter().map(|&p| v[p]).collect::<Vec<f64>>();
            let a = build_feature(&z, &zt, 4).unwrap();
            let b = build_feature(&relabel(&z), &zt.iter().map(|v| relabel(v)).collect::<Vec<_>>(), 4).unwrap();
            assert_eq!(a, b);
            assert!(a[..4].windows(2).all(|w| w[0] >= w[1]));
        }
    }

    #[test]
    fn inverse_frequency_weights() {
        let (wp, wn) = class_weights(10, 90);
        assert!((wp / wn - 9.0).abs() < 1e-12);
    }

    fn toy(n: usize, seed: u64) -> (Vec<Vec<f64>>, Vec<i8>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut f = Vec::new();
        let mut l = Vec::new();
        for i in 0..n {
            let err = i % 5 == 0;
            let shift = if err { 1.5 } else { 0.0 };
            f.push((0..4).map(|_| rng.random_range(-1.0..1.0) + shift).collect());
            l.push(if err { 1 } else { -1 });
        }
        (f, l)
    }

    #[test]
    fn training_is_deterministic_and_separates_toy_data() {
        let (f, l) = toy(200, 1);
        let cfg = MlpConfig {
            epochs: 30,
            ..MlpConfig::default()
        };
        let (a, _) = MlpModel::train_on_features(&f, &l, cfg.clone()).unwrap();
        let (b, _) = MlpModel::train_on_features(&f, &l, cfg).unwrap();
        assert_eq!(a, b);
        let s = a.scores(&f).unwrap();
        let pos: f64 = s.iter().zip(&l).filter(|(_, &y)| y == 1).map(|(v, _)| v).sum::<f64>() / 40.0;
        let neg: f64 = s.iter().zip(&l).filter(|(_, &y)| y == -1).map(|(v, _)| v).sum::<f64>() / 160.0;
        assert!(pos > neg + 0.2, "{pos} vs {neg}");
        assert!(s.iter().all(|v| *v > 0.0 && *v < 1.0));
    }

    #[test]
    fn single_class_is_rejected() {
        let (f, _) = toy(20, 2);
        assert!(MlpModel::train_on_features(&f, &[-1; 20], MlpConfig::default()).is_err());
    }

    #[test]
    fn eval_mode_is_stateless_and_checkpoint_round_trips() {
        let (f, l) = toy(60, 3);
        let (m, _) = MlpModel::train_on_features(&f, &l, MlpConfig { epochs: 3, ..MlpConfig::default() }).unwrap();
        let alone = m.score(&f[0]).unwrap();
        let _ = m.scores(&f[1..]).unwrap();
        assert_eq!(m.scores(&f).unwrap()[0], alone);
        assert_eq!(m.score(&f[0]).unwrap(), alone);
        let back = MlpModel::from_checkpoint(&Checkpoint::from_bytes(&m.to_checkpoint().unwrap().to_bytes()).unwrap()).unwrap();
        assert_eq!(back, m);
        assert!(m.score(&[0.0; 3]).is_err());
    }

    #[test]
    fn zero_logit_scores_one_half() {
        let mut m = MlpModel::new(MlpConfig::default(), 4, 4).unwrap();
        for p in m.params.iter_mut() {
            p.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        assert_eq!(m.score(&[0.3, 0.1, -2.0, 5.0]).unwrap(), 0.5);
    }
}
