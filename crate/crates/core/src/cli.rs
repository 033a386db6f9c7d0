//! The `invdet` command line.
//!
//! Every subcommand reads an optional `key = value` config file, lets flags
//! override it, and echoes the merged config into the output directory
//! before doing any work. Rerunning with `--config <echo>` reproduces the
//! run.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Deserialize;

use crate::attacks::{cw_attack, kd_attack, run_attack, AttackConfig, AttackKind, CombinedModelG, DetectorSpec};
use crate::autodiff::Tensor;
use crate::classifier::{Classifier, ClassifierConfig, TrainConfig};
use crate::config::KvConfig;
use crate::data::{select, write_idx, DatasetSpec, LabeledImage};
use crate::detectors::{calibrate_threshold, Aggregation, DEFAULT_TARGET_FPR};
use crate::error::{Error, Result};
use crate::evaluation::report::{read_csv, write_csv};
use crate::evaluation::{
    auroc_split, detector_scores, recompute_rows, run_experiment, AttackRow, DetectorKind, EvalReport, ExperimentSpec,
    ReportRow, ScoreRow, Suite, SuiteConfig,
};
use crate::mlp_detector::{image_features, write_features_csv, MlpConfig, MlpModel};
use crate::transforms::{parse_transform_list, TransformSpec};

#[derive(Parser, Debug)]
#[command(
    name = "invdet",
    version,
    about = "Detect natural and adversarial classification errors from softmax invariance under image transforms"
)]
pub struct Cli {
    /// `key = value` config file; flags override its entries.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Worker threads for scoring and attacks.
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Repeat for more log output.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train the image classifier.
    Train(TrainArgs),
    /// Train the MLP natural-error detector on the detector-train split.
    TrainDetector(TrainDetectorArgs),
    /// Attack correctly classified held-out images.
    Attack(AttackArgs),
    /// Score held-out images with one detector.
    Score(ScoreArgs),
    /// Run an experiment suite.
    Eval(EvalArgs),
    /// Check and print a finished experiment directory.
    Report(ReportArgs),
}

#[derive(Args, Debug, Default)]
pub struct DataArgs {
    /// synthetic, idx or cifar10.
    #[arg(long)]
    pub source: Option<String>,
    #[arg(long)]
    pub count: Option<usize>,
    #[arg(long)]
    pub num_classes: Option<usize>,
    #[arg(long)]
    pub image_size: Option<usize>,
    /// IDX image file.
    #[arg(long)]
    pub images: Option<PathBuf>,
    /// IDX label file.
    #[arg(long)]
    pub labels: Option<PathBuf>,
    /// Comma-separated CIFAR-10 batch files.
    #[arg(long)]
    pub batches: Option<String>,
    #[arg(long)]
    pub data_seed: Option<u64>,
    #[arg(long)]
    pub train_fraction: Option<f64>,
    #[arg(long)]
    pub detector_train_fraction: Option<f64>,
    #[arg(long)]
    pub detector_eval_fraction: Option<f64>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Where to write the classifier (default `<out>/classifier.ckpt`).
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub momentum: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr_step: Option<usize>,
    #[arg(long)]
    pub lr_gamma: Option<f64>,
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub augment_flip: Option<bool>,
    #[arg(long)]
    pub conv1: Option<usize>,
    #[arg(long)]
    pub conv2: Option<usize>,
    #[arg(long)]
    pub hidden: Option<usize>,
    /// Dropout rate, or `none`.
    #[arg(long)]
    pub dropout: Option<String>,
}

#[derive(Args, Debug)]
pub struct TrainDetectorArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub classifier: Option<PathBuf>,
    /// Where to write the MLP (default `<out>/mlp.ckpt`).
    #[arg(long)]
    pub mlp: Option<PathBuf>,
    #[arg(long)]
    pub mlp_epochs: Option<usize>,
    #[arg(long)]
    pub mlp_lr: Option<f64>,
    #[arg(long)]
    pub mlp_hidden: Option<usize>,
    #[arg(long)]
    pub mlp_transforms: Option<String>,
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub mlp_augment: Option<bool>,
    #[arg(long)]
    pub n_prime: Option<usize>,
    /// Also dump the detector-train features to this CSV.
    #[arg(long)]
    pub features: Option<PathBuf>,
}

#[derive(Args, Debug, Default)]
pub struct AttackFlags {
    /// fgsm, pgd or cw.
    #[arg(long)]
    pub kind: Option<String>,
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub targeted: Option<bool>,
    /// Fixed target class for every image.
    #[arg(long)]
    pub target: Option<usize>,
    /// C&W confidence.
    #[arg(long)]
    pub k: Option<f64>,
    #[arg(long)]
    pub epsilon: Option<f64>,
    #[arg(long)]
    pub step: Option<f64>,
    #[arg(long)]
    pub iterations: Option<usize>,
    #[arg(long)]
    pub binary_search_steps: Option<usize>,
    #[arg(long)]
    pub initial_c: Option<f64>,
    /// C&W Adam step size.
    #[arg(long)]
    pub attack_lr: Option<f64>,
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub random_start: Option<bool>,
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub abort_early: Option<bool>,
    #[arg(long)]
    pub attack_batch: Option<usize>,
}

#[derive(Args, Debug)]
pub struct AttackArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub attack: AttackFlags,
    #[arg(long)]
    pub classifier: Option<PathBuf>,
    /// Number of images to attack.
    #[arg(long)]
    pub n: Option<usize>,
    /// CSV with `id` and optional `target` columns selecting the images.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Attack the classifier combined with the D_KL detector.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub kd: Option<bool>,
    #[arg(long)]
    pub transform: Option<String>,
    #[arg(long = "T")]
    pub temperature: Option<f64>,
    /// Detector threshold; calibrated at `--target-fpr` when absent.
    #[arg(long)]
    pub threshold: Option<f64>,
    #[arg(long)]
    pub target_fpr: Option<f64>,
    #[arg(long)]
    pub kd_scale: Option<f64>,
}

#[derive(Args, Debug)]
pub struct ScoreArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub classifier: Option<PathBuf>,
    /// dkl, msr, dropout or mlp.
    #[arg(long)]
    pub detector: Option<String>,
    /// One transform, or a comma list combined by `--aggregate`.
    #[arg(long)]
    pub transform: Option<String>,
    #[arg(long = "T")]
    pub temperature: Option<f64>,
    /// mean, max or single.
    #[arg(long)]
    pub aggregate: Option<String>,
    #[arg(long)]
    pub mlp: Option<PathBuf>,
    /// eval, detector-train, train or all.
    #[arg(long)]
    pub split: Option<String>,
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub dropout_passes: Option<usize>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub attack: AttackFlags,
    /// ud-sweep, kd-temperature, transform-table or natural-errors.
    #[arg(long)]
    pub suite: Option<String>,
    #[arg(long)]
    pub classifier: Option<PathBuf>,
    #[arg(long)]
    pub mlp: Option<PathBuf>,
    #[arg(long)]
    pub transforms: Option<String>,
    #[arg(long)]
    pub temperatures: Option<String>,
    #[arg(long)]
    pub k_grid: Option<String>,
    #[arg(long)]
    pub n_eval: Option<usize>,
    #[arg(long)]
    pub n_attack: Option<usize>,
    #[arg(long)]
    pub target_fpr: Option<f64>,
    #[arg(long)]
    pub kd_scale: Option<f64>,
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub include_dropout: Option<bool>,
    #[arg(long)]
    pub dropout_passes: Option<usize>,
    #[arg(long)]
    pub mlp_epochs: Option<usize>,
    #[arg(long)]
    pub bins: Option<usize>,
    #[arg(long)]
    pub experiment_id: Option<String>,
}

#[derive(Args, Debug)]
pub struct ReportArgs {
    /// Experiment directory holding `report.json`.
    pub dir: PathBuf,
}

fn put<T: ToString>(kv: &mut KvConfig, key: &str, v: &Option<T>) {
    if let Some(v) = v {
        kv.set(key, v.to_string());
    }
}

fn put_path(kv: &mut KvConfig, key: &str, v: &Option<PathBuf>) {
    if let Some(v) = v {
        kv.set(key, v.display().to_string());
    }
}

impl DataArgs {
    fn apply(&self, kv: &mut KvConfig) {
        put(kv, "source", &self.source);
        put(kv, "count", &self.count);
        put(kv, "num_classes", &self.num_classes);
        put(kv, "image_size", &self.image_size);
        put_path(kv, "images", &self.images);
        put_path(kv, "labels", &self.labels);
        put(kv, "batches", &self.batches);
        put(kv, "data_seed", &self.data_seed);
        put(kv, "train_fraction", &self.train_fraction);
        put(kv, "detector_train_fraction", &self.detector_train_fraction);
        put(kv, "detector_eval_fraction", &self.detector_eval_fraction);
    }
}

impl AttackFlags {
    fn apply(&self, kv: &mut KvConfig) {
        put(kv, "kind", &self.kind);
        put(kv, "targeted", &self.targeted);
        put(kv, "target", &self.target);
        put(kv, "k", &self.k);
        put(kv, "epsilon", &self.epsilon);
        put(kv, "step", &self.step);
        put(kv, "iterations", &self.iterations);
        put(kv, "binary_search_steps", &self.binary_search_steps);
        put(kv, "initial_c", &self.initial_c);
        put(kv, "attack_lr", &self.attack_lr);
        put(kv, "random_start", &self.random_start);
        put(kv, "abort_early", &self.abort_early);
        put(kv, "attack_batch", &self.attack_batch);
    }
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Train(_) => "train",
            Command::TrainDetector(_) => "train-detector",
            Command::Attack(_) => "attack",
            Command::Score(_) => "score",
            Command::Eval(_) => "eval",
            Command::Report(_) => "report",
        }
    }

    fn apply(&self, kv: &mut KvConfig) {
        match self {
            Command::Train(a) => {
                a.data.apply(kv);
                put_path(kv, "checkpoint", &a.checkpoint);
                put(kv, "epochs", &a.epochs);
                put(kv, "lr", &a.lr);
                put(kv, "momentum", &a.momentum);
                put(kv, "weight_decay", &a.weight_decay);
                put(kv, "batch_size", &a.batch_size);
                put(kv, "lr_step", &a.lr_step);
                put(kv, "lr_gamma", &a.lr_gamma);
                put(kv, "augment_flip", &a.augment_flip);
                put(kv, "conv1", &a.conv1);
                put(kv, "conv2", &a.conv2);
                put(kv, "hidden", &a.hidden);
                put(kv, "dropout", &a.dropout);
            }
            Command::TrainDetector(a) => {
                a.data.apply(kv);
                put_path(kv, "classifier", &a.classifier);
                put_path(kv, "mlp", &a.mlp);
                put(kv, "mlp_epochs", &a.mlp_epochs);
                put(kv, "mlp_lr", &a.mlp_lr);
                put(kv, "mlp_hidden", &a.mlp_hidden);
                put(kv, "mlp_transforms", &a.mlp_transforms);
                put(kv, "mlp_augment", &a.mlp_augment);
                put(kv, "n_prime", &a.n_prime);
                put_path(kv, "features", &a.features);
            }
            Command::Attack(a) => {
                a.data.apply(kv);
                a.attack.apply(kv);
                put_path(kv, "classifier", &a.classifier);
                put(kv, "n", &a.n);
                put_path(kv, "manifest", &a.manifest);
                put(kv, "kd", &a.kd);
                put(kv, "transform", &a.transform);
                put(kv, "temperature", &a.temperature);
                put(kv, "threshold", &a.threshold);
                put(kv, "target_fpr", &a.target_fpr);
                put(kv, "kd_scale", &a.kd_scale);
            }
            Command::Score(a) => {
                a.data.apply(kv);
                put_path(kv, "classifier", &a.classifier);
                put(kv, "detector", &a.detector);
                put(kv, "transform", &a.transform);
                put(kv, "temperature", &a.temperature);
                put(kv, "aggregate", &a.aggregate);
                put_path(kv, "mlp", &a.mlp);
                put(kv, "split", &a.split);
                put(kv, "n", &a.n);
                put(kv, "dropout_passes", &a.dropout_passes);
            }
            Command::Eval(a) => {
                a.data.apply(kv);
                a.attack.apply(kv);
                put(kv, "suite", &a.suite);
                put_path(kv, "classifier", &a.classifier);
                put_path(kv, "mlp", &a.mlp);
                put(kv, "transforms", &a.transforms);
                put(kv, "temperatures", &a.temperatures);
                put(kv, "k_grid", &a.k_grid);
                put(kv, "n_eval", &a.n_eval);
                put(kv, "n_attack", &a.n_attack);
                put(kv, "target_fpr", &a.target_fpr);
                put(kv, "kd_scale", &a.kd_scale);
                put(kv, "include_dropout", &a.include_dropout);
                put(kv, "dropout_passes", &a.dropout_passes);
                put(kv, "mlp_epochs", &a.mlp_epochs);
                put(kv, "bins", &a.bins);
                put(kv, "experiment_id", &a.experiment_id);
            }
            Command::Report(_) => {}
        }
    }
}

/// Parses `argv`, runs the subcommand and returns the process exit code:
/// `0` on success, `2` on usage errors, `1` on runtime failures.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    let _ = env_logger::Builder::new().filter_level(level).parse_default_env().try_init();
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn execute(cli: &Cli) -> Result<()> {
    let mut kv = match &cli.config {
        Some(p) => KvConfig::load(p)?,
        None => KvConfig::new(),
    };
    put(&mut kv, "seed", &cli.seed);
    put_path(&mut kv, "out", &cli.out);
    cli.command.apply(&mut kv);
    let out = PathBuf::from(kv.get_str("out").unwrap_or("out"));
    let jobs: Option<usize> = match cli.jobs {
        Some(j) => Some(j),
        None => kv.get("jobs")?,
    };
    let pool = {
        let mut b = rayon::ThreadPoolBuilder::new();
        if let Some(j) = jobs {
            if j == 0 {
                return Err(Error::Config("--jobs must be positive".into()));
            }
            b = b.num_threads(j);
        }
        b.build().map_err(|e| Error::Config(format!("thread pool: {e}")))?
    };
    if !matches!(cli.command, Command::Report(_)) {
        std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
        let echo = out.join(format!("{}.config", cli.command.name()));
        std::fs::write(&echo, kv.to_string()).map_err(|e| Error::io(&echo, e))?;
    }
    pool.install(|| match &cli.command {
        Command::Train(_) => cmd_train(&kv, &out),
        Command::TrainDetector(_) => cmd_train_detector(&kv, &out),
        Command::Attack(_) => cmd_attack(&kv, &out),
        Command::Score(_) => cmd_score(&kv, &out),
        Command::Eval(_) => cmd_eval(&kv, &out),
        Command::Report(a) => cmd_report(&a.dir),
    })
}

fn path_or(kv: &KvConfig, key: &str, out: &Path, default: &str) -> PathBuf {
    kv.get_str(key).map(PathBuf::from).unwrap_or_else(|| out.join(default))
}

fn load_data(kv: &KvConfig) -> Result<(DatasetSpec, Vec<LabeledImage>, crate::data::DatasetSplit)> {
    let spec = DatasetSpec::from_config(kv)?;
    let (images, split) = spec.load_split()?;
    if images.is_empty() {
        return Err(Error::Config("dataset is empty".into()));
    }
    Ok((spec, images, split))
}

fn load_classifier(kv: &KvConfig, out: &Path, num_classes: usize) -> Result<Classifier> {
    let path = path_or(kv, "classifier", out, "classifier.ckpt");
    if !path.exists() {
        return Err(Error::Config(format!("classifier checkpoint {} does not exist", path.display())));
    }
    let m = Classifier::load(&path)?;
    if m.num_classes() != num_classes {
        return Err(Error::Config(format!(
            "dataset has {num_classes} classes but the classifier has {}",
            m.num_classes()
        )));
    }
    Ok(m)
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(value)? + "\n").map_err(|e| Error::io(path, e))
}

fn cmd_train(kv: &KvConfig, out: &Path) -> Result<()> {
    let (spec, images, split) = load_data(kv)?;
    let shape = images[0].pixels.shape().to_vec();
    let config = ClassifierConfig::from_config(kv, spec.num_classes(), shape[0], shape[1])?;
    let train_cfg = TrainConfig::from_config(kv)?;
    let mut model = Classifier::new(config, train_cfg.seed)?;
    let train = select(&images, &split.train);
    let eval = select(&images, &split.detector_eval);
    log::info!("training on {} images for {} epochs", train.len(), train_cfg.epochs);
    let report = model.train(&train, &train_cfg, Some(&eval))?;
    let ckpt = path_or(kv, "checkpoint", out, "classifier.ckpt");
    model.save(&ckpt)?;
    write_json(&out.join("train_report.json"), &report)?;
    println!(
        "train accuracy {:.4}, held-out accuracy {:.4}, checkpoint {}",
        report.train_accuracy,
        report.eval_accuracy.unwrap_or(f64::NAN),
        ckpt.display()
    );
    Ok(())
}

fn cmd_train_detector(kv: &KvConfig, out: &Path) -> Result<()> {
    let (spec, images, split) = load_data(kv)?;
    let classifier = load_classifier(kv, out, spec.num_classes())?;
    let cfg = MlpConfig::from_config(kv)?;
    let train = select(&images, &split.detector_train);
    let (mlp, report) = MlpModel::train_on_images(&classifier, &train, cfg)?;
    let path = path_or(kv, "mlp", out, "mlp.ckpt");
    mlp.save(&path)?;
    write_json(&out.join("mlp_report.json"), &report)?;
    if let Some(f) = kv.get_str("features") {
        let px: Vec<&Tensor> = train.iter().map(|i| &i.pixels).collect();
        let (features, preds) = image_features(&classifier, &px, mlp.transforms(), mlp.n_prime())?;
        let labels: Vec<i8> = preds
            .iter()
            .zip(&train)
            .map(|(&p, im)| crate::mlp_detector::error_label(p, im.label))
            .collect();
        let ids: Vec<u64> = train.iter().map(|i| i.id).collect();
        write_features_csv(Path::new(f), &ids, &labels, &features)?;
    }
    println!("MLP detector written to {}", path.display());
    Ok(())
}

#[derive(Deserialize)]
struct ManifestRow {
    id: u64,
    target: Option<usize>,
}

fn cmd_attack(kv: &KvConfig, out: &Path) -> Result<()> {
    let (spec, images, split) = load_data(kv)?;
    let classifier = load_classifier(kv, out, spec.num_classes())?;
    let mut cfg = AttackConfig::from_config(kv)?;
    let kd: bool = kv.get_or("kd", false)?;
    let eval = select(&images, &split.detector_eval);

    let (chosen, manifest_targets): (Vec<&LabeledImage>, Option<Vec<usize>>) = match kv.get_str("manifest") {
        Some(m) => {
            let rows: Vec<ManifestRow> = read_csv(Path::new(m))?;
            let ids: Vec<u64> = rows.iter().map(|r| r.id).collect();
            let chosen = select(&images, &ids);
            if chosen.len() != ids.len() {
                return Err(Error::Config(format!("manifest {m} names ids missing from the dataset")));
            }
            let targets = if rows.iter().all(|r| r.target.is_some()) {
                Some(rows.iter().map(|r| r.target.expect("checked")).collect())
            } else {
                None
            };
            (chosen, targets)
        }
        None => {
            let px: Vec<&Tensor> = eval.iter().map(|i| &i.pixels).collect();
            let preds = classifier.predict_batch(&px)?;
            let n: usize = kv.get_or("n", 100)?;
            let chosen = eval
                .iter()
                .zip(preds)
                .filter(|(i, p)| i.label == *p)
                .map(|(i, _)| *i)
                .take(n)
                .collect();
            (chosen, None)
        }
    };
    if chosen.is_empty() {
        return Err(Error::Config("no images to attack".into()));
    }
    let xs: Vec<&Tensor> = chosen.iter().map(|i| &i.pixels).collect();
    let ys: Vec<usize> = chosen.iter().map(|i| i.label).collect();
    let ids: Vec<u64> = chosen.iter().map(|i| i.id).collect();
    if manifest_targets.is_some() {
        cfg.targeted = true;
    }
    let targets = match &manifest_targets {
        Some(t) => {
            if t.iter().zip(&ys).any(|(a, b)| a == b) {
                return Err(Error::invalid("manifest target equals the true label"));
            }
            Some(t.clone())
        }
        None if cfg.targeted => Some(match cfg.target {
            Some(t) => {
                if ys.contains(&t) {
                    return Err(Error::invalid(format!("target {t} equals the true label of an attacked image")));
                }
                vec![t; ys.len()]
            }
            None => crate::attacks::random_targets(&ys, classifier.num_classes(), cfg.seed)?,
        }),
        None => None,
    };

    let (group, results) = if kd {
        if cfg.kind != AttackKind::Cw {
            return Err(Error::Config("known-detector attacks use --kind cw".into()));
        }
        let transform: TransformSpec = kv.get_str("transform").unwrap_or("hflip").parse()?;
        let temperature: f64 = kv.get_or("temperature", 1.0)?;
        let threshold = match kv.get::<f64>("threshold")? {
            Some(t) => t,
            None => {
                let fpr: f64 = kv.get_or("target_fpr", DEFAULT_TARGET_FPR)?;
                let calib = select(&images, &split.detector_train);
                let px: Vec<&Tensor> = calib.iter().map(|i| &i.pixels).collect();
                let preds = classifier.predict_batch(&px)?;
                let correct: Vec<&Tensor> = px
                    .iter()
                    .zip(&calib)
                    .zip(preds)
                    .filter(|((_, im), p)| im.label == *p)
                    .map(|((x, _), _)| *x)
                    .collect();
                let scores = crate::detectors::dkl_scores(&classifier, &correct, &transform, temperature)?;
                calibrate_threshold(&scores, fpr)?.threshold
            }
        };
        let g = CombinedModelG::new(
            &classifier,
            DetectorSpec {
                transform,
                temperature,
                threshold,
            },
            kv.get_or("kd_scale", 1.0)?,
        )?;
        println!("detector threshold τ = {threshold:e}");
        ("kd", kd_attack(&g, &xs, &ys, &ids, targets.as_deref(), &cfg)?)
    } else {
        let r = match (&targets, cfg.kind) {
            (Some(t), AttackKind::Cw) => cw_attack(&classifier, &xs, &ys, &ids, Some(t), &cfg)?,
            (Some(t), AttackKind::Pgd) => crate::attacks::pgd(&classifier, &xs, &ys, &ids, Some(t), &cfg)?,
            _ => run_attack(&classifier, &xs, &ys, &ids, &cfg)?,
        };
        ("ud", r)
    };
    let rows: Vec<AttackRow> = results.iter().map(|r| AttackRow::new(group, r)).collect();
    write_csv(&out.join("attacks.csv"), &rows)?;
    let adv: Vec<LabeledImage> = results
        .iter()
        .map(|r| LabeledImage {
            pixels: r.adversarial.clone().expect("adversarial image"),
            label: r.label,
            id: r.id,
        })
        .collect();
    write_idx(&adv, &out.join("adversarial-images.idx"), &out.join("adversarial-labels.idx"))?;
    let ok: Vec<&AttackRow> = rows.iter().filter(|r| r.success).collect();
    let mean = |f: fn(&AttackRow) -> f64| ok.iter().map(|r| f(r)).sum::<f64>() / ok.len().max(1) as f64;
    println!(
        "{} of {} attacks succeeded; mean L2 {:.3}, mean L∞ {:.2}",
        ok.len(),
        rows.len(),
        mean(|r| r.l2),
        mean(|r| r.linf)
    );
    Ok(())
}

fn detector_kind(kv: &KvConfig) -> Result<DetectorKind> {
    let temperature: f64 = kv.get_or("temperature", 1.0)?;
    match kv.get_str("detector").unwrap_or("dkl") {
        "dkl" => {
            let transforms = parse_transform_list(kv.get_str("transform").unwrap_or("hflip"))?;
            let mode: Aggregation = kv.get_str("aggregate").unwrap_or("mean").parse()?;
            if transforms.len() == 1 {
                Ok(DetectorKind::Dkl {
                    transform: transforms.into_iter().next().expect("one transform"),
                    temperature,
                })
            } else if mode == Aggregation::Single {
                Err(Error::Config("`aggregate = single` needs exactly one transform".into()))
            } else {
                Ok(DetectorKind::DklAggregate {
                    transforms,
                    temperature,
                    mode,
                })
            }
        }
        "msr" => Ok(DetectorKind::Msr),
        "dropout" => Ok(DetectorKind::Dropout {
            passes: kv.get_or("dropout_passes", crate::classifier::DEFAULT_DROPOUT_PASSES)?,
        }),
        "mlp" => Ok(DetectorKind::Mlp),
        other => Err(Error::Config(format!("unknown detector '{other}'"))),
    }
}

fn cmd_score(kv: &KvConfig, out: &Path) -> Result<()> {
    let (spec, images, split) = load_data(kv)?;
    let classifier = load_classifier(kv, out, spec.num_classes())?;
    let kind = detector_kind(kv)?;
    let mlp = match kind {
        DetectorKind::Mlp => Some(MlpModel::load(&path_or(kv, "mlp", out, "mlp.ckpt"))?),
        _ => None,
    };
    let split_name = kv.get_str("split").unwrap_or("eval");
    let pool: Vec<&LabeledImage> = match split_name {
        "eval" => select(&images, &split.detector_eval),
        "detector-train" => select(&images, &split.detector_train),
        "train" => select(&images, &split.train),
        "all" => images.iter().collect(),
        other => return Err(Error::Config(format!("unknown split '{other}'"))),
    };
    let n: usize = kv.get_or("n", pool.len())?;
    let pool = &pool[..n.min(pool.len())];
    let px: Vec<&Tensor> = pool.iter().map(|i| &i.pixels).collect();
    let ids: Vec<u64> = pool.iter().map(|i| i.id).collect();
    let preds = classifier.predict_batch(&px)?;
    let seed: u64 = kv.get_or("seed", 0)?;
    let scores = detector_scores(&kind, &classifier, mlp.as_ref(), &px, &ids, seed)?;
    let rows: Vec<ScoreRow> = pool
        .iter()
        .zip(&preds)
        .zip(&scores)
        .map(|((im, &p), &s)| ScoreRow {
            id: im.id,
            label: im.label,
            predicted: p,
            score: s,
            detector: kind.name().into(),
            transform: kind.transform_label(),
            temperature: kind.temperature(),
            group: split_name.into(),
            positive: p != im.label,
        })
        .collect();
    write_csv(&out.join("scores.csv"), &rows)?;
    let (neg, pos): (Vec<&ScoreRow>, Vec<&ScoreRow>) = rows.iter().partition(|r| !r.positive);
    print!("scored {} images ({} misclassified)", rows.len(), pos.len());
    if !neg.is_empty() && !pos.is_empty() {
        let a = auroc_split(
            &neg.iter().map(|r| r.score).collect::<Vec<_>>(),
            &pos.iter().map(|r| r.score).collect::<Vec<_>>(),
        )?;
        print!("; natural-error AUROC {a:.4}");
    }
    println!();
    Ok(())
}

fn cmd_eval(kv: &KvConfig, out: &Path) -> Result<()> {
    let suite: Suite = kv.require_str("suite")?.parse()?;
    let spec = ExperimentSpec {
        suite,
        dataset: DatasetSpec::from_config(kv)?,
        classifier: path_or(kv, "classifier", out, "classifier.ckpt"),
        mlp: kv.get_str("mlp").map(PathBuf::from),
        out_dir: out.to_path_buf(),
        experiment_id: kv.get_str("experiment_id").map(String::from),
        config: SuiteConfig::from_config(kv)?,
    };
    let report = run_experiment(&spec)?;
    println!("{}", format_rows(&report.rows));
    println!(
        "report written to {}",
        out.join(&report.experiment_id).join("report.json").display()
    );
    Ok(())
}

fn cmd_report(dir: &Path) -> Result<()> {
    let report = EvalReport::load(&dir.join("report.json"))?;
    let rows = recompute_rows(dir)?;
    if rows != report.rows {
        return Err(Error::format(
            dir.display().to_string(),
            "report.json aggregates do not match scores.csv and attacks.csv",
        ));
    }
    println!("{} ({}, seed {})", report.experiment_id, report.suite, report.seed);
    println!("{}", format_rows(&report.rows));
    Ok(())
}

fn opt(v: Option<f64>, digits: usize) -> String {
    v.map(|x| format!("{x:.digits$}")).unwrap_or_else(|| "-".into())
}

/// Plain-text table of report rows.
pub fn format_rows(rows: &[ReportRow]) -> String {
    let mut s = format!(
        "{:<28} {:<9} {:<30} {:>6} {:>7} {:>7} {:>9} {:>8} {:>8}\n",
        "group", "detector", "transform", "T", "AUROC", "bypass", "success", "L2", "Linf"
    );
    for r in rows {
        let _ = writeln!(
            s,
            "{:<28} {:<9} {:<30} {:>6} {:>7} {:>7} {:>9} {:>8} {:>8}",
            r.key.group,
            r.key.detector,
            r.key.transform,
            r.key.temperature,
            opt(r.auroc, 4),
            opt(r.bypass_rate, 3),
            if r.n_attacks > 0 {
                format!("{}/{}", r.n_success, r.n_attacks)
            } else {
                "-".into()
            },
            opt(r.mean_l2, 3),
            opt(r.mean_linf, 2)
        );
    }
    s
}
