//! Labeled image sets: a synthetic shape generator, IDX and CIFAR-10
//! readers/writers, and deterministic dataset splits.

use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::config::KvConfig;
use crate::error::{Error, Result};

/// One `C×H×W` image with pixels in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledImage {
    pub pixels: Tensor,
    pub label: usize,
    pub id: u64,
}

impl LabeledImage {
    pub fn channels(&self) -> usize {
        self.pixels.shape()[0]
    }
}

/// Stacks images into a `B×C×H×W` batch.
pub fn batch_pixels(images: &[&LabeledImage]) -> Result<Tensor> {
    let refs: Vec<&Tensor> = images.iter().map(|im| &im.pixels).collect();
    Tensor::stack(&refs)
}

// ------------------------------------------------------------------ shapes

pub const SHAPE_FAMILIES: [&str; 10] = [
    "disk",
    "square",
    "triangle",
    "plus",
    "ring",
    "diamond",
    "hbar",
    "vbar",
    "xcross",
    "frame",
];

/// Inside-test for shape family `class` at offset `(x, y)` from the shape
/// center, in units of the shape radius.
fn inside(class: usize, x: f64, y: f64) -> bool {
    let (ax, ay) = (x.abs(), y.abs());
    let r2 = x * x + y * y;
    match class {
        0 => r2 <= 1.0,
        1 => ax.max(ay) <= 0.8,
        2 => y <= 0.7 && y >= -0.9 && ax <= (y + 0.9) * 0.62,
        3 => (ax <= 0.3 && ay <= 1.0) || (ay <= 0.3 && ax <= 1.0),
        4 => (0.36..=1.0).contains(&r2),
        5 => ax + ay <= 1.0,
        6 => ax <= 1.0 && ay <= 0.35,
        7 => ay <= 1.0 && ax <= 0.35,
        8 => {
            let (u, v) = ((x + y).abs() / 2f64.sqrt(), (x - y).abs() / 2f64.sqrt());
            (u <= 0.22 && v <= 1.0) || (v <= 0.22 && u <= 1.0)
        }
        9 => ax.max(ay) <= 0.85 && ax.max(ay) >= 0.5,
        _ => false,
    }
}

/// Generates `n` class-balanced RGB shape images (`label = i mod N`).
///
/// Each image draws its own background and foreground colours, contrast,
/// position, size and pixel noise from a generator seeded by `(seed, i)`,
/// so the output is a pure function of the arguments. Pixels are quantised
/// to 8-bit levels.
pub fn generate_shapes(
    n: usize,
    num_classes: usize,
    image_size: usize,
    seed: u64,
) -> Result<Vec<LabeledImage>> {
    if !(2..=10).contains(&num_classes) {
        return Err(Error::invalid(format!(
            "shape generator supports 2..=10 classes, got {num_classes}"
        )));
    }
    if image_size < 16 {
        return Err(Error::invalid(format!("image size must be ≥ 16, got {image_size}")));
    }
    Ok((0..n)
        .map(|i| render_shape(i as u64, i % num_classes, image_size, seed))
        .collect())
}

fn render_shape(id: u64, class: usize, size: usize, seed: u64) -> LabeledImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ id);
    let s = size as f64;
    let radius = rng.random_range(0.16..0.36) * s;
    let margin = radius * 0.9;
    let cx = rng.random_range(margin..s - margin);
    let cy = rng.random_range(margin..s - margin);
    let bg: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.1..0.9));
    let hue: [f64; 3] = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
    let norm = hue.iter().map(|h| h * h).sum::<f64>().sqrt().max(1e-6);
    let contrast = rng.random_range(0.15..0.7);
    let fg: [f64; 3] = std::array::from_fn(|c| (bg[c] + contrast * hue[c] / norm * 1.7).clamp(0.0, 1.0));
    let sigma = rng.random_range(0.01..0.12);
    let noise = Normal::new(0.0, sigma).expect("valid sigma");
    let angle = rng.random_range(-0.25..0.25f64);
    let (sin, cos) = angle.sin_cos();

    const SUB: usize = 3;
    let mut coverage = vec![0.0; size * size];
    for i in 0..size {
        for j in 0..size {
            let mut hits = 0;
            for si in 0..SUB {
                for sj in 0..SUB {
                    let py = i as f64 + (si as f64 + 0.5) / SUB as f64 - cy;
                    let px = j as f64 + (sj as f64 + 0.5) / SUB as f64 - cx;
                    let (u, v) = (cos * px + sin * py, -sin * px + cos * py);
                    if inside(class, u / radius, v / radius) {
                        hits += 1;
                    }
                }
            }
            coverage[i * size + j] = hits as f64 / (SUB * SUB) as f64;
        }
    }
    let mut data = Vec::with_capacity(3 * size * size);
    for c in 0..3 {
        for &cov in &coverage {
            let v = bg[c] + cov * (fg[c] - bg[c]) + noise.sample(&mut rng);
            data.push(quantize(v));
        }
    }
    LabeledImage {
        pixels: Tensor::new(vec![3, size, size], data).expect("shape matches"),
        label: class,
        id,
    }
}

fn quantize(v: f64) -> f64 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

// ------------------------------------------------------------------- IDX

const IDX_LABELS: u32 = 0x0000_0801;
const IDX_IMAGES: u32 = 0x0000_0803;
const IDX_IMAGES_CHW: u32 = 0x0000_0804;

fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

fn be_u32(bytes: &[u8], at: usize, ctx: &Path) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes(b.try_into().unwrap()))
        .ok_or_else(|| Error::format(ctx.display().to_string(), "truncated header"))
}

/// Reads an IDX image file (`0x803`: N×H×W, or `0x804`: N×C×H×W) as
/// `C×H×W` tensors scaled to `[0, 1]`.
pub fn read_idx_images(path: &Path) -> Result<Vec<Tensor>> {
    let bytes = read_file(path)?;
    let ctx = path.display().to_string();
    let magic = be_u32(&bytes, 0, path)?;
    let rank = match magic {
        IDX_IMAGES => 3,
        IDX_IMAGES_CHW => 4,
        other => return Err(Error::format(ctx, format!("bad IDX image magic {other:#010x}"))),
    };
    let dims: Vec<usize> = (0..rank)
        .map(|k| be_u32(&bytes, 4 + 4 * k, path).map(|d| d as usize))
        .collect::<Result<_>>()?;
    let (n, c, h, w) = if rank == 3 {
        (dims[0], 1, dims[1], dims[2])
    } else {
        (dims[0], dims[1], dims[2], dims[3])
    };
    let header = 4 + 4 * rank;
    let per = c * h * w;
    let expected = header + n * per;
    if bytes.len() < expected {
        return Err(Error::format(
            ctx,
            format!("truncated: {} bytes, header declares {expected}", bytes.len()),
        ));
    }
    Ok((0..n)
        .map(|k| {
            let px = &bytes[header + k * per..header + (k + 1) * per];
            Tensor::new(vec![c, h, w], px.iter().map(|&b| b as f64 / 255.0).collect())
                .expect("shape matches")
        })
        .collect())
}

/// Reads an IDX label file (`0x801`).
pub fn read_idx_labels(path: &Path) -> Result<Vec<u8>> {
    let bytes = read_file(path)?;
    let magic = be_u32(&bytes, 0, path)?;
    if magic != IDX_LABELS {
        return Err(Error::format(
            path.display().to_string(),
            format!("bad IDX label magic {magic:#010x}"),
        ));
    }
    let n = be_u32(&bytes, 4, path)? as usize;
    bytes
        .get(8..8 + n)
        .map(<[u8]>::to_vec)
        .ok_or_else(|| Error::format(path.display().to_string(), "truncated label payload"))
}

/// Reads an IDX image/label file pair, rejecting labels `≥ num_classes`.
pub fn read_idx(images: &Path, labels: &Path, num_classes: usize) -> Result<Vec<LabeledImage>> {
    let pixels = read_idx_images(images)?;
    let labels = read_idx_labels(labels)?;
    if pixels.len() != labels.len() {
        return Err(Error::format(
            images.display().to_string(),
            format!("{} images but {} labels", pixels.len(), labels.len()),
        ));
    }
    pixels
        .into_iter()
        .zip(labels)
        .enumerate()
        .map(|(i, (p, l))| {
            if l as usize >= num_classes {
                return Err(Error::format(
                    labels_ctx(images),
                    format!("label {l} out of range for {num_classes} classes"),
                ));
            }
            Ok(LabeledImage {
                pixels: p,
                label: l as usize,
                id: i as u64,
            })
        })
        .collect()
}

fn labels_ctx(p: &Path) -> String {
    p.display().to_string()
}

fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes images as IDX (`0x803` for single-channel sets, `0x804`
/// otherwise) plus an `0x801` label file.
pub fn write_idx(images: &[LabeledImage], images_path: &Path, labels_path: &Path) -> Result<()> {
    let first = images
        .first()
        .ok_or_else(|| Error::invalid("cannot write an empty IDX set"))?;
    let shape = first.pixels.shape().to_vec();
    let mut img = Vec::new();
    if shape[0] == 1 {
        img.extend_from_slice(&IDX_IMAGES.to_be_bytes());
        for d in [images.len(), shape[1], shape[2]] {
            img.extend_from_slice(&(d as u32).to_be_bytes());
        }
    } else {
        img.extend_from_slice(&IDX_IMAGES_CHW.to_be_bytes());
        for d in [images.len(), shape[0], shape[1], shape[2]] {
            img.extend_from_slice(&(d as u32).to_be_bytes());
        }
    }
    let mut lab = Vec::with_capacity(8 + images.len());
    lab.extend_from_slice(&IDX_LABELS.to_be_bytes());
    lab.extend_from_slice(&(images.len() as u32).to_be_bytes());
    for im in images {
        if im.pixels.shape() != &shape[..] {
            return Err(Error::invalid("IDX images must share one shape"));
        }
        if im.label > 255 {
            return Err(Error::invalid(format!("label {} does not fit a byte", im.label)));
        }
        img.extend(im.pixels.data().iter().map(|&v| to_byte(v)));
        lab.push(im.label as u8);
    }
    write_bytes(images_path, &img)?;
    write_bytes(labels_path, &lab)
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))
}

// --------------------------------------------------------------- CIFAR-10

pub const CIFAR_RECORD: usize = 1 + 3072;

/// Reads a CIFAR-10 binary batch: records of one label byte followed by
/// 1024 red, 1024 green and 1024 blue bytes.
pub fn read_cifar10(path: &Path) -> Result<Vec<LabeledImage>> {
    let bytes = read_file(path)?;
    let ctx = path.display().to_string();
    if bytes.len() % CIFAR_RECORD != 0 {
        return Err(Error::format(
            ctx,
            format!(
                "truncated: {} bytes is not a multiple of the {CIFAR_RECORD}-byte record",
                bytes.len()
            ),
        ));
    }
    bytes
        .chunks_exact(CIFAR_RECORD)
        .enumerate()
        .map(|(i, rec)| {
            let label = rec[0] as usize;
            if label >= 10 {
                return Err(Error::format(ctx.clone(), format!("record {i}: label {label} ≥ 10")));
            }
            Ok(LabeledImage {
                pixels: Tensor::new(
                    vec![3, 32, 32],
                    rec[1..].iter().map(|&b| b as f64 / 255.0).collect(),
                )
                .expect("shape matches"),
                label,
                id: i as u64,
            })
        })
        .collect()
}

pub fn write_cifar10(images: &[LabeledImage], path: &Path) -> Result<()> {
    let mut out = Vec::with_capacity(images.len() * CIFAR_RECORD);
    for im in images {
        if im.pixels.shape() != [3, 32, 32] || im.label >= 10 {
            return Err(Error::invalid("CIFAR-10 records are 3×32×32 with labels < 10"));
        }
        out.push(im.label as u8);
        out.extend(im.pixels.data().iter().map(|&v| to_byte(v)));
    }
    write_bytes(path, &out)
}

// ----------------------------------------------------------------- splits

/// Disjoint id partitions: classifier training, detector training and
/// detector evaluation.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub seed: u64,
    pub train: Vec<u64>,
    pub detector_train: Vec<u64>,
    pub detector_eval: Vec<u64>,
}

pub const DEFAULT_DETECTOR_TRAIN_FRACTION: f64 = 0.2;

/// Shuffles `ids` with `seed` and cuts `floor(f·n)` ids for the training and
/// detector-training partitions; detector evaluation receives the rest.
pub fn split_dataset(ids: &[u64], fractions: (f64, f64, f64), seed: u64) -> Result<DatasetSplit> {
    let (a, b, c) = fractions;
    if [a, b, c].iter().any(|f| !(*f > 0.0) || !f.is_finite()) {
        return Err(Error::invalid(format!("split fractions must be positive, got {fractions:?}")));
    }
    if a + b + c > 1.0 + 1e-9 {
        return Err(Error::invalid(format!("split fractions sum to {} > 1", a + b + c)));
    }
    let mut shuffled = ids.to_vec();
    shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n = shuffled.len();
    let n_train = (a * n as f64 + 1e-9).floor() as usize;
    let n_det = (b * n as f64 + 1e-9).floor() as usize;
    Ok(DatasetSplit {
        seed,
        train: shuffled[..n_train].to_vec(),
        detector_train: shuffled[n_train..n_train + n_det].to_vec(),
        detector_eval: shuffled[n_train + n_det..].to_vec(),
    })
}

/// Splits a held-out pool (images the classifier never trained on) into
/// detector-train and detector-eval ids.
pub fn split_detector_pool(pool: &[u64], detector_train_fraction: f64, seed: u64) -> Result<(Vec<u64>, Vec<u64>)> {
    if !(detector_train_fraction > 0.0 && detector_train_fraction < 1.0) {
        return Err(Error::invalid(format!(
            "detector-train fraction must be in (0, 1), got {detector_train_fraction}"
        )));
    }
    let mut shuffled = pool.to_vec();
    shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let k = (detector_train_fraction * pool.len() as f64 + 1e-9).floor() as usize;
    let rest = shuffled.split_off(k);
    Ok((shuffled, rest))
}

/// Selects images by id, preserving the order of `ids`.
pub fn select<'a>(images: &'a [LabeledImage], ids: &[u64]) -> Vec<&'a LabeledImage> {
    let index: std::collections::HashMap<u64, &LabeledImage> =
        images.iter().map(|im| (im.id, im)).collect();
    ids.iter().filter_map(|id| index.get(id).copied()).collect()
}

// --------------------------------------------------------------- manifest

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "lowercase")]
pub enum DataSource {
    Synthetic {
        count: usize,
        num_classes: usize,
        image_size: usize,
    },
    Idx {
        images: PathBuf,
        labels: PathBuf,
        num_classes: usize,
    },
    Cifar10 {
        batches: Vec<PathBuf>,
    },
}

/// Dataset manifest: where the images come from and how they are split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub source: DataSource,
    pub seed: u64,
    pub fractions: (f64, f64, f64),
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            source: DataSource::Synthetic {
                count: 8000,
                num_classes: 4,
                image_size: 32,
            },
            seed: 7,
            fractions: (0.6, 0.1, 0.3),
        }
    }
}

impl DatasetSpec {
    /// Reads `source`, `count`, `num_classes`, `image_size`, `images`,
    /// `labels`, `batches` (comma-separated), `data_seed`, `train_fraction`,
    /// `detector_train_fraction` and `detector_eval_fraction` keys.
    pub fn from_config(cfg: &KvConfig) -> Result<Self> {
        let def = Self::default();
        let num_classes = cfg.get_or("num_classes", 4usize)?;
        let source = match cfg.get_str("source").unwrap_or("synthetic") {
            "synthetic" => DataSource::Synthetic {
                count: cfg.get_or("count", 8000usize)?,
                num_classes,
                image_size: cfg.get_or("image_size", 32usize)?,
            },
            "idx" => DataSource::Idx {
                images: cfg.require_str("images")?.into(),
                labels: cfg.require_str("labels")?.into(),
                num_classes,
            },
            "cifar10" => DataSource::Cifar10 {
                batches: cfg
                    .require_str("batches")?
                    .split(',')
                    .map(|s| PathBuf::from(s.trim()))
                    .collect(),
            },
            other => return Err(Error::Config(format!("unknown data source '{other}'"))),
        };
        Ok(Self {
            source,
            seed: cfg.get_or("data_seed", def.seed)?,
            fractions: (
                cfg.get_or("train_fraction", def.fractions.0)?,
                cfg.get_or("detector_train_fraction", def.fractions.1)?,
                cfg.get_or("detector_eval_fraction", def.fractions.2)?,
            ),
        })
    }

    pub fn num_classes(&self) -> usize {
        match &self.source {
            DataSource::Synthetic { num_classes, .. } | DataSource::Idx { num_classes, .. } => {
                *num_classes
            }
            DataSource::Cifar10 { .. } => 10,
        }
    }

    pub fn load(&self) -> Result<Vec<LabeledImage>> {
        match &self.source {
            DataSource::Synthetic {
                count,
                num_classes,
                image_size,
            } => generate_shapes(*count, *num_classes, *image_size, self.seed),
            DataSource::Idx {
                images,
                labels,
                num_classes,
            } => read_idx(images, labels, *num_classes),
            DataSource::Cifar10 { batches } => {
                let mut all = Vec::new();
                for b in batches {
                    for mut im in read_cifar10(b)? {
                        im.id = all.len() as u64;
                        all.push(im);
                    }
                }
                Ok(all)
            }
        }
    }

    pub fn load_split(&self) -> Result<(Vec<LabeledImage>, DatasetSplit)> {
        let images = self.load()?;
        let ids: Vec<u64> = images.iter().map(|im| im.id).collect();
        let split = split_dataset(&ids, self.fractions, self.seed)?;
        Ok((images, split))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    #[test]
    fn shapes_are_deterministic_and_balanced() {
        let a = generate_shapes(100, 4, 16, 7).unwrap();
        let b = generate_shapes(100, 4, 16, 7).unwrap();
        assert_eq!(a, b);
        let big = generate_shapes(1000, 4, 16, 3).unwrap();
        let mut hist = [0; 4];
        big.iter().for_each(|im| hist[im.label] += 1);
        assert_eq!(hist, [250; 4]);
        assert!(big.iter().all(|im| im.pixels.data().iter().all(|&v| (0.0..=1.0).contains(&v))));
    }

    #[test]
    fn shapes_reject_bad_arguments() {
        assert!(generate_shapes(10, 1, 32, 0).is_err());
        assert!(generate_shapes(10, 11, 32, 0).is_err());
        assert!(generate_shapes(10, 4, 8, 0).is_err());
    }

    #[test]
    fn idx_header_and_payload() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("img.idx");
        let mut bytes = Vec::new();
        bytes.extend_from_slice(&0x0000_0803u32.to_be_bytes());
        for d in [10u32, 28, 28] {
            bytes.extend_from_slice(&d.to_be_bytes());
        }
        bytes.extend((0..10 * 784).map(|i| (i % 256) as u8));
        std::fs::write(&p, &bytes).unwrap();
        let imgs = read_idx_images(&p).unwrap();
        assert_eq!(imgs.len(), 10);
        assert_eq!(imgs[0].shape(), &[1, 28, 28]);
        assert_eq!(imgs[0].data()[255], 1.0);

        std::fs::write(&p, &bytes[..bytes.len() - 1]).unwrap();
        assert!(read_idx_images(&p).is_err());
        let mut bad = bytes.clone();
        bad[3] = 0x07;
        std::fs::write(&p, &bad).unwrap();
        assert!(read_idx_images(&p).is_err());
    }

    #[test]
    fn idx_labels_out_of_range() {
        let dir = tempfile::tempdir().unwrap();
        let set = generate_shapes(6, 4, 16, 1).unwrap();
        let (ip, lp) = (dir.path().join("i"), dir.path().join("l"));
        write_idx(&set, &ip, &lp).unwrap();
        assert!(read_idx(&ip, &lp, 4).is_ok());
        assert!(read_idx(&ip, &lp, 3).is_err());
    }

    #[test]
    fn cifar_record_count_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("batch.bin");
        let mut bytes = vec![0u8; 10 * CIFAR_RECORD];
        for r in 0..10 {
            bytes[r * CIFAR_RECORD] = r as u8;
        }
        std::fs::write(&p, &bytes).unwrap();
        let recs = read_cifar10(&p).unwrap();
        assert_eq!(bytes.len(), 30730);
        assert_eq!(recs.len(), 10);
        assert_eq!(recs[9].label, 9);
        std::fs::write(&p, &bytes[..30729]).unwrap();
        assert!(read_cifar10(&p).is_err());
        bytes[0] = 10;
        std::fs::write(&p, &bytes).unwrap();
        assert!(read_cifar10(&p).is_err());
    }

    #[test]
    fn split_sizes_and_determinism() {
        let ids: Vec<u64> = (0..100).collect();
        let s = split_dataset(&ids, (0.8, 0.1, 0.1), 5).unwrap();
        assert_eq!((s.train.len(), s.detector_train.len(), s.detector_eval.len()), (80, 10, 10));
        let all: HashSet<u64> = s.train.iter().chain(&s.detector_train).chain(&s.detector_eval).copied().collect();
        assert_eq!(all.len(), 100);
        assert_eq!(s, split_dataset(&ids, (0.8, 0.1, 0.1), 5).unwrap());
        assert_ne!(s, split_dataset(&ids, (0.8, 0.1, 0.1), 6).unwrap());
        assert!(split_dataset(&ids, (0.8, 0.2, 0.1), 5).is_err());
        assert!(split_dataset(&ids, (0.8, 0.0, 0.1), 5).is_err());
    }

    #[test]
    fn detector_pool_takes_twenty_percent() {
        let pool: Vec<u64> = (1000..1500).collect();
        let (train, eval) = split_detector_pool(&pool, DEFAULT_DETECTOR_TRAIN_FRACTION, 1).unwrap();
        assert_eq!(train.len(), 100);
        assert_eq!(eval.len(), 400);
    }
}
