//! Small convolutional image classifier, temperature softmax and the
//! prediction rule.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{argmax_first, softmax_into, Checkpoint, Tape, Tensor, Var};
use crate::config::KvConfig;
use crate::data::LabeledImage;
use crate::error::{Error, Result};

/// Images per forward pass when scoring large sets.
pub const EVAL_CHUNK: usize = 64;

/// Default number of stochastic passes for the dropout baseline.
pub const DEFAULT_DROPOUT_PASSES: usize = 30;

/// A probability vector over classes and the temperature that produced it.
#[derive(Clone, Debug, PartialEq)]
pub struct PosteriorDist {
    pub probs: Vec<f64>,
    pub temperature: f64,
}

impl PosteriorDist {
    /// Class with the highest probability; ties go to the lowest index.
    pub fn argmax(&self) -> usize {
        argmax_first(&self.probs)
    }

    pub fn max_prob(&self) -> f64 {
        self.probs.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }
}

/// `softmax(z / T)`, computed with max subtraction.
pub fn softmax_t(z: &[f64], temperature: f64) -> Result<PosteriorDist> {
    if !(temperature > 0.0) || !temperature.is_finite() {
        return Err(Error::Domain {
            op: "softmax_t",
            msg: format!("temperature must be positive and finite, got {temperature}"),
        });
    }
    if z.is_empty() {
        return Err(Error::invalid("softmax of an empty logit vector"));
    }
    let scaled: Vec<f64> = z.iter().map(|v| v / temperature).collect();
    let mut probs = vec![0.0; z.len()];
    softmax_into(&scaled, &mut probs);
    Ok(PosteriorDist {
        probs,
        temperature,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifierConfig {
    pub num_classes: usize,
    pub in_channels: usize,
    pub image_size: usize,
    pub conv1: usize,
    pub conv2: usize,
    pub hidden: usize,
    /// Dropout rate after the hidden dense layer; `None` builds no dropout
    /// layer at all.
    pub dropout: Option<f64>,
}

impl ClassifierConfig {
    pub fn new(num_classes: usize, in_channels: usize, image_size: usize) -> Self {
        Self {
            num_classes,
            in_channels,
            image_size,
            conv1: 16,
            conv2: 32,
            hidden: 64,
            dropout: Some(0.5),
        }
    }

    /// Architecture keys `conv1`, `conv2`, `hidden` and `dropout` (a rate,
    /// or `none`) over the defaults for the given input geometry.
    pub fn from_config(cfg: &KvConfig, num_classes: usize, in_channels: usize, image_size: usize) -> Result<Self> {
        let d = Self::new(num_classes, in_channels, image_size);
        let dropout = match cfg.get_str("dropout") {
            None => d.dropout,
            Some("none") => None,
            Some(_) => Some(cfg.get_or("dropout", 0.0)?),
        };
        let c = Self {
            conv1: cfg.get_or("conv1", d.conv1)?,
            conv2: cfg.get_or("conv2", d.conv2)?,
            hidden: cfg.get_or("hidden", d.hidden)?,
            dropout,
            ..d
        };
        c.validate()?;
        Ok(c)
    }

    fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::invalid("classifier needs at least 2 classes"));
        }
        if self.image_size < 4 || self.image_size % 4 != 0 {
            return Err(Error::invalid(format!(
                "image size must be a positive multiple of 4, got {}",
                self.image_size
            )));
        }
        if let Some(p) = self.dropout {
            if !(0.0..1.0).contains(&p) {
                return Err(Error::invalid(format!("dropout rate {p} outside [0, 1)")));
            }
        }
        Ok(())
    }

    fn flat_features(&self) -> usize {
        self.conv2 * (self.image_size / 4) * (self.image_size / 4)
    }

    fn param_shapes(&self) -> Vec<(&'static str, Vec<usize>)> {
        vec![
            ("conv1.weight", vec![self.conv1, self.in_channels, 3, 3]),
            ("conv1.bias", vec![self.conv1]),
            ("conv2.weight", vec![self.conv2, self.conv1, 3, 3]),
            ("conv2.bias", vec![self.conv2]),
            ("fc1.weight", vec![self.flat_features(), self.hidden]),
            ("fc1.bias", vec![self.hidden]),
            ("fc2.weight", vec![self.hidden, self.num_classes]),
            ("fc2.bias", vec![self.num_classes]),
        ]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    /// Multiply the learning rate by `lr_gamma` every `lr_step` epochs.
    pub lr_step: usize,
    pub lr_gamma: f64,
    pub seed: u64,
    pub augment_flip: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 24,
            lr: 0.05,
            momentum: 0.9,
            weight_decay: 5e-4,
            batch_size: 32,
            lr_step: 8,
            lr_gamma: 0.5,
            seed: 1,
            augment_flip: true,
        }
    }
}

impl TrainConfig {
    pub fn from_config(cfg: &KvConfig) -> Result<Self> {
        let d = Self::default();
        Ok(Self {
            epochs: cfg.get_or("epochs", d.epochs)?,
            lr: cfg.get_or("lr", d.lr)?,
            momentum: cfg.get_or("momentum", d.momentum)?,
            weight_decay: cfg.get_or("weight_decay", d.weight_decay)?,
            batch_size: cfg.get_or("batch_size", d.batch_size)?,
            lr_step: cfg.get_or("lr_step", d.lr_step)?,
            lr_gamma: cfg.get_or("lr_gamma", d.lr_gamma)?,
            seed: cfg.get_or("seed", d.seed)?,
            augment_flip: cfg.get_or("augment_flip", d.augment_flip)?,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epoch_losses: Vec<f64>,
    pub train_accuracy: f64,
    pub eval_accuracy: Option<f64>,
}

/// conv(3×3)-ReLU-pool, conv(3×3)-ReLU-pool, dense-ReLU-dropout, dense.
#[derive(Clone, Debug, PartialEq)]
pub struct Classifier {
    config: ClassifierConfig,
    params: Vec<Tensor>,
}

impl Classifier {
    /// Kaiming-normal weights, zero biases.
    pub fn new(config: ClassifierConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = config
            .param_shapes()
            .into_iter()
            .map(|(name, shape)| {
                if name.ends_with("bias") {
                    return Tensor::zeros(&shape);
                }
                let fan_in: usize = if shape.len() == 4 {
                    shape[1..].iter().product()
                } else {
                    shape[0]
                };
                let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("valid std");
                let n = shape.iter().product();
                Tensor::new(shape, (0..n).map(|_| normal.sample(&mut rng)).collect())
                    .expect("shape matches")
            })
            .collect();
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &ClassifierConfig {
        &self.config
    }

    pub fn num_classes(&self) -> usize {
        self.config.num_classes
    }

    pub fn input_shape(&self) -> [usize; 3] {
        [self.config.in_channels, self.config.image_size, self.config.image_size]
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    /// Raw parameter access; shapes must be preserved.
    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn has_dropout(&self) -> bool {
        self.config.dropout.is_some()
    }

    /// Records the parameters on `tape`, as gradient-tracking leaves when
    /// `trainable`, otherwise as constants.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Vec<Var> {
        self.params
            .iter()
            .map(|p| {
                if trainable {
                    tape.param(p)
                } else {
                    tape.constant(p.clone())
                }
            })
            .collect()
    }

    /// Logits `B×N` for a `B×C×H×W` input. Dropout is active only when a
    /// generator is supplied.
    pub fn forward(
        &self,
        tape: &mut Tape,
        x: Var,
        params: &[Var],
        dropout_rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Var> {
        let shape = tape.shape(x).to_vec();
        let [c, h, w] = self.input_shape();
        if shape.len() != 4 || shape[1..] != [c, h, w] {
            return Err(Error::ShapeMismatch {
                op: "classifier input",
                lhs: shape,
                rhs: vec![c, h, w],
            });
        }
        let batch = shape[0];
        let flat = tape.reshape(x, &[batch, c, h * w])?;
        let mean = tape.mean_axis(flat, 2)?;
        let centered = tape.sub(flat, mean)?;
        let x = tape.reshape(centered, &shape)?;
        let z = tape.conv2d(x, params[0], Some(params[1]), 1, 1)?;
        let z = tape.relu(z)?;
        let z = tape.max_pool2d(z)?;
        let z = tape.conv2d(z, params[2], Some(params[3]), 1, 1)?;
        let z = tape.relu(z)?;
        let z = tape.max_pool2d(z)?;
        let z = tape.reshape(z, &[batch, self.config.flat_features()])?;
        let z = tape.matmul(z, params[4])?;
        let z = tape.add(z, params[5])?;
        let mut z = tape.relu(z)?;
        if let (Some(p), Some(rng)) = (self.config.dropout, dropout_rng) {
            if p > 0.0 {
                let n = batch * self.config.hidden;
                let keep = 1.0 / (1.0 - p);
                let mask: Vec<f64> = (0..n)
                    .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
                    .collect();
                let m = tape.constant(Tensor::new(vec![batch, self.config.hidden], mask)?);
                z = tape.mul(z, m)?;
            }
        }
        let z = tape.matmul(z, params[6])?;
        tape.add(z, params[7])
    }

    /// Eval-mode logits for one `C×H×W` image.
    pub fn logits(&self, image: &Tensor) -> Result<Vec<f64>> {
        Ok(self.logits_batch(&[image])?.pop().expect("one row"))
    }

    /// Eval-mode logits for many images, computed in fixed-size chunks.
    pub fn logits_batch(&self, images: &[&Tensor]) -> Result<Vec<Vec<f64>>> {
        let chunks: Vec<Result<Vec<Vec<f64>>>> = images
            .par_chunks(EVAL_CHUNK)
            .map(|chunk| self.logits_chunk(chunk, None))
            .collect();
        let mut out = Vec::with_capacity(images.len());
        for c in chunks {
            out.extend(c?);
        }
        Ok(out)
    }

    fn logits_chunk(&self, chunk: &[&Tensor], rng: Option<&mut ChaCha8Rng>) -> Result<Vec<Vec<f64>>> {
        let mut tape = Tape::new();
        let params = self.bind(&mut tape, false);
        let x = tape.constant(Tensor::stack(chunk)?);
        let z = self.forward(&mut tape, x, &params, rng)?;
        let n = self.num_classes();
        Ok(tape.value(z).chunks(n).map(<[f64]>::to_vec).collect())
    }

    pub fn posterior(&self, image: &Tensor, temperature: f64) -> Result<PosteriorDist> {
        softmax_t(&self.logits(image)?, temperature)
    }

    pub fn predict(&self, image: &Tensor) -> Result<usize> {
        Ok(argmax_first(&self.logits(image)?))
    }

    pub fn predict_batch(&self, images: &[&Tensor]) -> Result<Vec<usize>> {
        Ok(self
            .logits_batch(images)?
            .iter()
            .map(|z| argmax_first(z))
            .collect())
    }

    pub fn accuracy(&self, data: &[&LabeledImage]) -> Result<f64> {
        if data.is_empty() {
            return Err(Error::invalid("accuracy of an empty set"));
        }
        let px: Vec<&Tensor> = data.iter().map(|im| &im.pixels).collect();
        let pred = self.predict_batch(&px)?;
        let correct = pred.iter().zip(data).filter(|(p, im)| **p == im.label).count();
        Ok(correct as f64 / data.len() as f64)
    }

    /// `K` posteriors at `T = 1` with dropout active, each pass drawing its
    /// own masks from a generator seeded by `seed`.
    pub fn stochastic_posteriors(&self, image: &Tensor, passes: usize, seed: u64) -> Result<Vec<PosteriorDist>> {
        if !self.has_dropout() {
            return Err(Error::invalid("model has no dropout layer"));
        }
        if passes < 2 {
            return Err(Error::invalid(format!("need at least 2 stochastic passes, got {passes}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let batch: Vec<&Tensor> = vec![image; passes];
        self.logits_chunk(&batch, Some(&mut rng))?
            .iter()
            .map(|z| softmax_t(z, 1.0))
            .collect()
    }

    /// Mini-batch SGD with momentum on softmax cross-entropy.
    pub fn train(
        &mut self,
        data: &[&LabeledImage],
        cfg: &TrainConfig,
        eval: Option<&[&LabeledImage]>,
    ) -> Result<TrainReport> {
        if data.is_empty() {
            return Err(Error::invalid("empty training set"));
        }
        if cfg.batch_size == 0 {
            return Err(Error::invalid("batch size must be positive"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut velocity: Vec<Vec<f64>> = self.params.iter().map(|p| vec![0.0; p.len()]).collect();
        let mut order: Vec<usize> = (0..data.len()).collect();
        let mut epoch_losses = Vec::with_capacity(cfg.epochs);
        let mut correct = 0usize;
        let mut tape = Tape::new();
        for epoch in 0..cfg.epochs {
            let lr = cfg.lr * cfg.lr_gamma.powi((epoch / cfg.lr_step.max(1)) as i32);
            order.shuffle(&mut rng);
            let (mut total, mut seen) = (0.0, 0usize);
            correct = 0;
            for (step, idx) in order.chunks(cfg.batch_size).enumerate() {
                let imgs: Vec<Tensor> = idx
                    .iter()
                    .map(|&i| {
                        if cfg.augment_flip && rng.random::<bool>() {
                            hflip_tensor(&data[i].pixels)
                        } else {
                            data[i].pixels.clone()
                        }
                    })
                    .collect();
                let labels: Vec<usize> = idx.iter().map(|&i| data[i].label).collect();
                tape.reset();
                let params = self.bind(&mut tape, true);
                let refs: Vec<&Tensor> = imgs.iter().collect();
                let x = tape.constant(Tensor::stack(&refs)?);
                let z = self.forward(&mut tape, x, &params, Some(&mut rng))?;
                let n = self.num_classes();
                correct += tape
                    .value(z)
                    .chunks(n)
                    .zip(&labels)
                    .filter(|(row, &y)| argmax_first(row) == y)
                    .count();
                let logp = tape.log_softmax(z)?;
                let picked = tape.pick(logp, &labels)?;
                let mean = tape.mean(picked)?;
                let loss = tape.neg(mean)?;
                let value = tape.scalar(loss);
                if !value.is_finite() {
                    return Err(Error::Divergence {
                        epoch,
                        step,
                        loss: value,
                    });
                }
                tape.backward(loss)?;
                for ((p, v), var) in self.params.iter_mut().zip(&mut velocity).zip(&params) {
                    let g = tape.grad(*var).expect("parameter gradient");
                    for ((w, vel), &gi) in p.data_mut().iter_mut().zip(v.iter_mut()).zip(g) {
                        *vel = cfg.momentum * *vel + gi + cfg.weight_decay * *w;
                        *w -= lr * *vel;
                    }
                }
                total += value * idx.len() as f64;
                seen += idx.len();
            }
            let mean_loss = total / seen as f64;
            log::debug!("epoch {epoch}: loss {mean_loss:.4} lr {lr}");
            epoch_losses.push(mean_loss);
        }
        let eval_accuracy = eval.map(|e| self.accuracy(e)).transpose()?;
        Ok(TrainReport {
            epoch_losses,
            train_accuracy: correct as f64 / data.len() as f64,
            eval_accuracy,
        })
    }

    /// Mean cross-entropy in eval mode.
    pub fn loss(&self, data: &[&LabeledImage]) -> Result<f64> {
        let px: Vec<&Tensor> = data.iter().map(|im| &im.pixels).collect();
        let logits = self.logits_batch(&px)?;
        let total: f64 = logits
            .iter()
            .zip(data)
            .map(|(z, im)| {
                let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
                lse - z[im.label]
            })
            .sum();
        Ok(total / data.len() as f64)
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let mut ck = Checkpoint::new();
        ck.push_bytes("__meta__", &serde_json::to_vec(&self.config)?)?;
        for ((name, _), p) in self.config.param_shapes().iter().zip(&self.params) {
            ck.push_tensor(name, p)?;
        }
        Ok(ck)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let config: ClassifierConfig = serde_json::from_slice(ck.bytes("__meta__")?)?;
        config.validate()?;
        let params = config
            .param_shapes()
            .into_iter()
            .map(|(name, shape)| {
                let t = ck.tensor(name)?;
                if t.shape() != &shape[..] {
                    return Err(Error::format(
                        "classifier checkpoint",
                        format!("{name} has shape {:?}, expected {shape:?}", t.shape()),
                    ));
                }
                Ok(t)
            })
            .collect::<Result<_>>()?;
        Ok(Self { config, params })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint()?.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}

/// Mirrors a `C×H×W` image left to right.
pub(crate) fn hflip_tensor(t: &Tensor) -> Tensor {
    let s = t.shape();
    let w = s[s.len() - 1];
    let mut data = t.data().to_vec();
    data.chunks_mut(w).for_each(<[f64]>::reverse);
    Tensor::new(s.to_vec(), data).expect("same shape")
}
