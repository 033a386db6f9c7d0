//! Canned experiment suites.
//!
//! * `ud-sweep`: targeted C&W at every confidence in the grid, scored by
//!   D_KL, MSR and MC dropout.
//! * `transform-table`: one C&W run scored by D_KL under each transform.
//! * `kd-temperature`: known-detector attacks for every transform and
//!   temperature, with bypass rates at the calibrated threshold.
//! * `natural-errors`: clean held-out images, MLP detector against D_KL,
//!   MSR and dropout.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::histogram::{score_histogram, Histogram};
use super::report::{
    aggregate, read_csv, write_csv, write_roc_files, AttackRow, EvalReport, ReportRow, RowKey, ScoreRow,
    REPORT_SCHEMA_VERSION,
};
use crate::attacks::{kd_attack, random_targets, run_attack, AttackConfig, AttackKind, AttackResult, CombinedModelG, DetectorSpec};
use crate::autodiff::Tensor;
use crate::classifier::Classifier;
use crate::config::KvConfig;
use crate::data::{select, DatasetSpec, LabeledImage};
use crate::detectors::{
    aggregate_scores, calibrate_threshold, dkl_scores, dropout_score, msr_from_logits, Aggregation,
    DEFAULT_TARGET_FPR,
};
use crate::error::{Error, Result};
use crate::mlp_detector::{MlpConfig, MlpModel};
use crate::transforms::{parse_transform_list, TransformSpec};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Suite {
    UdSweep,
    KdTemperature,
    TransformTable,
    NaturalErrors,
}

impl Suite {
    pub const ALL: [Suite; 4] = [Suite::UdSweep, Suite::KdTemperature, Suite::TransformTable, Suite::NaturalErrors];

    pub fn default_transforms(self) -> Vec<TransformSpec> {
        let list = match self {
            Suite::UdSweep | Suite::NaturalErrors => "hflip",
            Suite::TransformTable => "hflip,gamma:0.6,zoom:1.05",
            Suite::KdTemperature => "hflip,zoom:1.03,shift:0.5,0.5",
        };
        parse_transform_list(list).expect("built-in transform list")
    }

    pub fn default_temperatures(self) -> Vec<f64> {
        match self {
            Suite::KdTemperature => vec![1.0, 0.5, 0.15],
            _ => vec![1.0],
        }
    }
}

impl fmt::Display for Suite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Suite::UdSweep => "ud-sweep",
            Suite::KdTemperature => "kd-temperature",
            Suite::TransformTable => "transform-table",
            Suite::NaturalErrors => "natural-errors",
        })
    }
}

impl FromStr for Suite {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Suite::ALL
            .into_iter()
            .find(|x| x.to_string() == s)
            .ok_or_else(|| Error::Config(format!("unknown suite '{s}'")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuiteConfig {
    pub seed: u64,
    /// Clean held-out images scored per group.
    pub n_eval: usize,
    /// Correctly classified images attacked per configuration.
    pub n_attack: usize,
    /// C&W confidences for `ud-sweep`.
    pub confidences: Vec<f64>,
    /// `None` picks the suite's default list.
    pub transforms: Option<Vec<TransformSpec>>,
    pub temperatures: Option<Vec<f64>>,
    pub target_fpr: f64,
    pub attack: AttackConfig,
    /// Logit scale `s` of the combined model.
    pub kd_scale: f64,
    pub include_dropout: bool,
    pub dropout_passes: usize,
    pub mlp: MlpConfig,
    pub histogram_bins: usize,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            n_eval: 500,
            n_attack: 100,
            confidences: vec![0.0, 2.0, 4.0, 8.0],
            transforms: None,
            temperatures: None,
            target_fpr: DEFAULT_TARGET_FPR,
            attack: AttackConfig::default(),
            kd_scale: 1.0,
            include_dropout: true,
            dropout_passes: crate::classifier::DEFAULT_DROPOUT_PASSES,
            mlp: MlpConfig::default(),
            histogram_bins: 40,
        }
    }
}

fn parse_f64_list(s: &str) -> Result<Vec<f64>> {
    s.split(',')
        .map(|v| {
            v.trim()
                .parse::<f64>()
                .map_err(|_| Error::Config(format!("'{v}' is not a number")))
        })
        .collect()
}

impl SuiteConfig {
    pub fn from_config(cfg: &KvConfig) -> Result<Self> {
        let d = Self::default();
        let mut attack = AttackConfig::from_config(cfg)?;
        if !cfg.contains("targeted") {
            attack.targeted = true;
        }
        Ok(Self {
            seed: cfg.get_or("seed", d.seed)?,
            n_eval: cfg.get_or("n_eval", d.n_eval)?,
            n_attack: cfg.get_or("n_attack", d.n_attack)?,
            confidences: match cfg.get_str("k_grid") {
                Some(s) => parse_f64_list(s)?,
                None => d.confidences,
            },
            transforms: cfg.get_str("transforms").map(parse_transform_list).transpose()?,
            temperatures: cfg.get_str("temperatures").map(parse_f64_list).transpose()?,
            target_fpr: cfg.get_or("target_fpr", d.target_fpr)?,
            attack,
            kd_scale: cfg.get_or("kd_scale", d.kd_scale)?,
            include_dropout: cfg.get_or("include_dropout", d.include_dropout)?,
            dropout_passes: cfg.get_or("dropout_passes", d.dropout_passes)?,
            mlp: MlpConfig::from_config(cfg)?,
            histogram_bins: cfg.get_or("bins", d.histogram_bins)?,
        })
    }

    fn transforms_for(&self, suite: Suite) -> Vec<TransformSpec> {
        self.transforms.clone().unwrap_or_else(|| suite.default_transforms())
    }

    fn temperatures_for(&self, suite: Suite) -> Vec<f64> {
        self.temperatures.clone().unwrap_or_else(|| suite.default_temperatures())
    }

    fn validate(&self, suite: Suite) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("{suite}: {m}")));
        if self.n_eval == 0 {
            return bad("n_eval must be positive".into());
        }
        if suite != Suite::NaturalErrors {
            if self.n_attack == 0 {
                return bad("n_attack must be positive".into());
            }
            if self.attack.kind == AttackKind::Fgsm && self.attack.targeted {
                return bad("FGSM is untargeted; set targeted = false".into());
            }
        }
        if suite == Suite::KdTemperature && self.attack.kind != AttackKind::Cw {
            return bad("known-detector attacks run C&W on the combined model".into());
        }
        if suite == Suite::UdSweep && self.confidences.is_empty() {
            return bad("empty confidence grid".into());
        }
        if self.transforms_for(suite).is_empty() {
            return bad("empty transform list".into());
        }
        let temps = self.temperatures_for(suite);
        if temps.is_empty() || temps.iter().any(|t| !(*t > 0.0)) {
            return bad("temperatures must be a nonempty list of positive values".into());
        }
        if self.histogram_bins == 0 {
            return bad("bins must be positive".into());
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum DetectorKind {
    Dkl { transform: TransformSpec, temperature: f64 },
    DklAggregate { transforms: Vec<TransformSpec>, temperature: f64, mode: Aggregation },
    Msr,
    Dropout { passes: usize },
    Mlp,
}

impl DetectorKind {
    pub fn name(&self) -> &'static str {
        match self {
            DetectorKind::Dkl { .. } => "dkl",
            DetectorKind::DklAggregate { mode: Aggregation::Max, .. } => "dkl-max",
            DetectorKind::DklAggregate { .. } => "dkl-mean",
            DetectorKind::Msr => "msr",
            DetectorKind::Dropout { .. } => "dropout",
            DetectorKind::Mlp => "mlp",
        }
    }

    pub fn transform_label(&self) -> String {
        match self {
            DetectorKind::Dkl { transform, .. } => transform.to_string(),
            DetectorKind::DklAggregate { transforms, .. } => {
                transforms.iter().map(|t| t.to_string()).collect::<Vec<_>>().join("+")
            }
            _ => String::new(),
        }
    }

    pub fn temperature(&self) -> f64 {
        match self {
            DetectorKind::Dkl { temperature, .. } | DetectorKind::DklAggregate { temperature, .. } => *temperature,
            _ => 1.0,
        }
    }
}

/// Scores that grow with suspicion for every detector kind. Dropout passes
/// are seeded from `seed` and each image id.
pub fn detector_scores(
    kind: &DetectorKind,
    classifier: &Classifier,
    mlp: Option<&MlpModel>,
    images: &[&Tensor],
    ids: &[u64],
    seed: u64,
) -> Result<Vec<f64>> {
    match kind {
        DetectorKind::Dkl { transform, temperature } => dkl_scores(classifier, images, transform, *temperature),
        DetectorKind::DklAggregate {
            transforms,
            temperature,
            mode,
        } => {
            let per: Vec<Vec<f64>> = transforms
                .iter()
                .map(|t| dkl_scores(classifier, images, t, *temperature))
                .collect::<Result<_>>()?;
            (0..images.len())
                .map(|i| aggregate_scores(&per.iter().map(|s| s[i]).collect::<Vec<_>>(), *mode))
                .collect()
        }
        DetectorKind::Msr => classifier
            .logits_batch(images)?
            .iter()
            .map(|z| msr_from_logits(z))
            .collect(),
        DetectorKind::Dropout { passes } => images
            .par_iter()
            .zip(ids)
            .map(|(x, &id)| dropout_score(classifier, x, *passes, seed ^ id.wrapping_mul(0x9E37_79B9_7F4A_7C15)))
            .collect(),
        DetectorKind::Mlp => {
            let mlp = mlp.ok_or_else(|| Error::Config("MLP detector requested without a trained model".into()))?;
            mlp.score_images(classifier, images)
        }
    }
}

/// Images the suites draw from.
pub struct SuiteData<'a> {
    /// Held-out images for calibration and MLP training.
    pub detector_train: Vec<&'a LabeledImage>,
    /// Held-out images for scoring and attacks.
    pub eval: Vec<&'a LabeledImage>,
}

impl<'a> SuiteData<'a> {
    pub fn from_split(images: &'a [LabeledImage], split: &crate::data::DatasetSplit) -> Self {
        Self {
            detector_train: select(images, &split.detector_train),
            eval: select(images, &split.detector_eval),
        }
    }
}

/// Everything a suite produces; `results` keeps the attack outputs (with
/// images) per group for post-hoc checks.
pub struct SuiteOutput {
    pub report: EvalReport,
    pub keys: Vec<RowKey>,
    pub scores: Vec<ScoreRow>,
    pub attacks: Vec<AttackRow>,
    pub histograms: Vec<(String, Histogram)>,
    pub results: Vec<(String, Vec<AttackResult>)>,
}

struct Clean<'a> {
    images: Vec<&'a LabeledImage>,
    preds: Vec<usize>,
}

impl<'a> Clean<'a> {
    fn new(classifier: &Classifier, images: Vec<&'a LabeledImage>) -> Result<Self> {
        let px: Vec<&Tensor> = images.iter().map(|i| &i.pixels).collect();
        let preds = classifier.predict_batch(&px)?;
        Ok(Self { images, preds })
    }

    fn correct(&self) -> Clean<'a> {
        self.filter(|i, p| i.label == p)
    }

    fn errors(&self) -> Clean<'a> {
        self.filter(|i, p| i.label != p)
    }

    fn filter(&self, keep: impl Fn(&LabeledImage, usize) -> bool) -> Clean<'a> {
        let (images, preds) = self
            .images
            .iter()
            .zip(&self.preds)
            .filter(|(i, &p)| keep(i, p))
            .map(|(i, &p)| (*i, p))
            .unzip();
        Clean { images, preds }
    }

    fn pixels(&self) -> Vec<&'a Tensor> {
        self.images.iter().map(|i| &i.pixels).collect()
    }

    fn ids(&self) -> Vec<u64> {
        self.images.iter().map(|i| i.id).collect()
    }
}

struct Ctx<'a> {
    cfg: &'a SuiteConfig,
    classifier: &'a Classifier,
    mlp: Option<&'a MlpModel>,
    keys: Vec<RowKey>,
    scores: Vec<ScoreRow>,
    attacks: Vec<AttackRow>,
}

impl Ctx<'_> {
    fn score(&self, kind: &DetectorKind, images: &[&Tensor], ids: &[u64]) -> Result<Vec<f64>> {
        detector_scores(kind, self.classifier, self.mlp, images, ids, self.cfg.seed)
    }

    fn threshold(&self, kind: &DetectorKind, calibration: &Clean<'_>) -> Result<Option<f64>> {
        if calibration.images.is_empty() {
            return Ok(None);
        }
        let s = self.score(kind, &calibration.pixels(), &calibration.ids())?;
        Ok(Some(calibrate_threshold(&s, self.cfg.target_fpr)?.threshold))
    }

    fn push_scores(&mut self, group: &str, kind: &DetectorKind, rows: &[(u64, usize, usize, bool)], scores: &[f64]) {
        for (&(id, label, predicted, positive), &score) in rows.iter().zip(scores) {
            self.scores.push(ScoreRow {
                id,
                label,
                predicted,
                score,
                detector: kind.name().into(),
                transform: kind.transform_label(),
                temperature: kind.temperature(),
                group: group.into(),
                positive,
            });
        }
    }

    /// Scores clean negatives and the given positives for one detector and
    /// records the row key.
    #[allow(clippy::too_many_arguments)]
    fn emit(
        &mut self,
        group: &str,
        k: Option<f64>,
        kind: &DetectorKind,
        negatives: &Clean<'_>,
        neg_scores: &[f64],
        positives: &[(u64, usize, usize, &Tensor)],
        threshold: Option<f64>,
    ) -> Result<()> {
        let neg_rows: Vec<(u64, usize, usize, bool)> = negatives
            .images
            .iter()
            .zip(&negatives.preds)
            .map(|(i, &p)| (i.id, i.label, p, false))
            .collect();
        self.push_scores(group, kind, &neg_rows, neg_scores);
        let px: Vec<&Tensor> = positives.iter().map(|p| p.3).collect();
        let ids: Vec<u64> = positives.iter().map(|p| p.0).collect();
        let pos_scores = self.score(kind, &px, &ids)?;
        let pos_rows: Vec<(u64, usize, usize, bool)> = positives.iter().map(|p| (p.0, p.1, p.2, true)).collect();
        self.push_scores(group, kind, &pos_rows, &pos_scores);
        self.keys.push(RowKey {
            group: group.into(),
            detector: kind.name().into(),
            transform: kind.transform_label(),
            temperature: kind.temperature(),
            k,
            threshold,
        });
        Ok(())
    }
}

/// Adversarial images that fool the classifier in the attack's sense.
fn fooling(results: &[AttackResult], targeted: bool) -> Vec<(u64, usize, usize, &Tensor)> {
    results
        .iter()
        .filter(|r| match (targeted, r.target) {
            (true, Some(t)) => r.predicted == t,
            _ => r.predicted != r.label,
        })
        .map(|r| (r.id, r.label, r.predicted, r.adversarial.as_ref().expect("adversarial image")))
        .collect()
}

fn fmt_k(k: f64) -> String {
    format!("k={k}")
}

/// Runs one suite on an in-memory classifier. `mlp` is trained on the
/// detector-train split when the natural-errors suite needs one and none is
/// given.
pub fn run_suite(
    suite: Suite,
    classifier: &Classifier,
    mlp: Option<&MlpModel>,
    data: &SuiteData<'_>,
    cfg: &SuiteConfig,
) -> Result<SuiteOutput> {
    cfg.validate(suite)?;
    let start = Instant::now();
    if data.eval.is_empty() {
        return Err(Error::Config(format!("{suite}: no evaluation images")));
    }
    let trained;
    let mlp = match (suite, mlp) {
        (Suite::NaturalErrors, None) => {
            let (m, _) = MlpModel::train_on_images(classifier, &data.detector_train, cfg.mlp.clone())?;
            trained = m;
            Some(&trained)
        }
        (_, m) => m,
    };
    let mut ctx = Ctx {
        cfg,
        classifier,
        mlp,
        keys: Vec::new(),
        scores: Vec::new(),
        attacks: Vec::new(),
    };
    let n = cfg.n_eval.min(data.eval.len());
    let clean = Clean::new(classifier, data.eval[..n].to_vec())?;
    let negatives = clean.correct();
    let natural = clean.errors();
    let calibration = Clean::new(classifier, data.detector_train.clone())?.correct();
    let attack_set = Clean::new(classifier, data.eval.clone())?.correct();
    let take = cfg.n_attack.min(attack_set.images.len());
    let attack_imgs: Vec<&LabeledImage> = attack_set.images[..take].to_vec();
    let ax: Vec<&Tensor> = attack_imgs.iter().map(|i| &i.pixels).collect();
    let ay: Vec<usize> = attack_imgs.iter().map(|i| i.label).collect();
    let aid: Vec<u64> = attack_imgs.iter().map(|i| i.id).collect();
    let transforms = cfg.transforms_for(suite);
    let temps = cfg.temperatures_for(suite);
    let mut results: Vec<(String, Vec<AttackResult>)> = Vec::new();
    let mut histograms = Vec::new();

    let base_attack = AttackConfig {
        seed: cfg.seed,
        ..cfg.attack.clone()
    };
    let targets = if base_attack.targeted && base_attack.target.is_none() {
        Some(random_targets(&ay, classifier.num_classes(), cfg.seed)?)
    } else {
        None
    };
    let run_ud = |k: f64| -> Result<Vec<AttackResult>> {
        let acfg = AttackConfig {
            confidence: k,
            ..base_attack.clone()
        };
        match (&targets, acfg.kind) {
            (Some(t), AttackKind::Cw) => crate::attacks::cw_attack(classifier, &ax, &ay, &aid, Some(t), &acfg),
            (Some(t), AttackKind::Pgd) => crate::attacks::pgd(classifier, &ax, &ay, &aid, Some(t), &acfg),
            _ => run_attack(classifier, &ax, &ay, &aid, &acfg),
        }
    };

    let mut ud_detectors: Vec<DetectorKind> = Vec::new();
    for &temperature in &temps {
        for t in &transforms {
            ud_detectors.push(DetectorKind::Dkl {
                transform: t.clone(),
                temperature,
            });
        }
        if suite == Suite::TransformTable && transforms.len() > 1 {
            for mode in [Aggregation::Mean, Aggregation::Max] {
                ud_detectors.push(DetectorKind::DklAggregate {
                    transforms: transforms.clone(),
                    temperature,
                    mode,
                });
            }
        }
    }
    ud_detectors.push(DetectorKind::Msr);
    if cfg.include_dropout && classifier.has_dropout() && suite != Suite::TransformTable {
        ud_detectors.push(DetectorKind::Dropout {
            passes: cfg.dropout_passes,
        });
    }

    match suite {
        Suite::UdSweep | Suite::TransformTable => {
            let grid = if suite == Suite::UdSweep {
                cfg.confidences.clone()
            } else {
                vec![cfg.attack.confidence]
            };
            let neg_px = negatives.pixels();
            let neg_ids = negatives.ids();
            let mut neg_scores = Vec::new();
            let mut taus = Vec::new();
            for kind in &ud_detectors {
                neg_scores.push(ctx.score(kind, &neg_px, &neg_ids)?);
                taus.push(ctx.threshold(kind, &calibration)?);
            }
            for &k in &grid {
                let group = fmt_k(k);
                log::info!("{suite}: attacking {} images at {group}", ax.len());
                let res = run_ud(k)?;
                ctx.attacks.extend(res.iter().map(|r| AttackRow::new(&group, r)));
                let pos = fooling(&res, base_attack.targeted);
                for (j, kind) in ud_detectors.iter().enumerate() {
                    ctx.emit(&group, Some(k), kind, &negatives, &neg_scores[j], &pos, taus[j])?;
                }
                if histograms.is_empty() {
                    let adv_px: Vec<&Tensor> = pos.iter().map(|p| p.3).collect();
                    let adv_ids: Vec<u64> = pos.iter().map(|p| p.0).collect();
                    let adv = ctx.score(&ud_detectors[0], &adv_px, &adv_ids)?;
                    let nat = ctx.score(&ud_detectors[0], &natural.pixels(), &natural.ids())?;
                    histograms = dkl_histograms(&ud_detectors[0], &neg_scores[0], &nat, &adv, cfg.histogram_bins)?;
                }
                results.push((group, res));
            }
        }
        Suite::KdTemperature => {
            let k = cfg.attack.confidence;
            // unknown-detector baseline against every detector setting
            let ud = run_ud(k)?;
            ctx.attacks.extend(ud.iter().map(|r| AttackRow::new("ud", r)));
            let pos = fooling(&ud, base_attack.targeted);
            for kind in ud_detectors.iter().filter(|d| matches!(d, DetectorKind::Dkl { .. })) {
                let neg = ctx.score(kind, &negatives.pixels(), &negatives.ids())?;
                let tau = ctx.threshold(kind, &calibration)?;
                ctx.emit("ud", Some(k), kind, &negatives, &neg, &pos, tau)?;
            }
            results.push(("ud".into(), ud));
            for &temperature in &temps {
                for t in &transforms {
                    let kind = DetectorKind::Dkl {
                        transform: t.clone(),
                        temperature,
                    };
                    let tau = ctx
                        .threshold(&kind, &calibration)?
                        .ok_or_else(|| Error::Config("no correctly classified calibration images".into()))?;
                    let g = CombinedModelG::new(
                        classifier,
                        DetectorSpec {
                            transform: t.clone(),
                            temperature,
                            threshold: tau,
                        },
                        cfg.kd_scale,
                    )?;
                    let group = format!("kd/{t}/T={temperature}");
                    log::info!("{suite}: attacking {} images, {group}, τ = {tau:.4e}", ax.len());
                    let res = kd_attack(&g, &ax, &ay, &aid, targets.as_deref(), &base_attack)?;
                    ctx.attacks.extend(res.iter().map(|r| AttackRow::new(&group, r)));
                    let pos = fooling(&res, base_attack.targeted);
                    let neg = ctx.score(&kind, &negatives.pixels(), &negatives.ids())?;
                    ctx.emit(&group, Some(k), &kind, &negatives, &neg, &pos, Some(tau))?;
                    results.push((group, res));
                }
            }
        }
        Suite::NaturalErrors => {
            let mut detectors = vec![DetectorKind::Mlp];
            detectors.extend(ud_detectors.iter().cloned());
            let px = clean.pixels();
            let ids = clean.ids();
            let pos: Vec<(u64, usize, usize, &Tensor)> = natural
                .images
                .iter()
                .zip(&natural.preds)
                .map(|(i, &p)| (i.id, i.label, p, &i.pixels))
                .collect();
            for kind in &detectors {
                let all = ctx.score(kind, &px, &ids)?;
                let neg: Vec<f64> = all
                    .iter()
                    .zip(&clean.images)
                    .zip(&clean.preds)
                    .filter(|((_, i), &p)| i.label == p)
                    .map(|((s, _), _)| *s)
                    .collect();
                let tau = ctx.threshold(kind, &calibration)?;
                ctx.emit("natural", None, kind, &negatives, &neg, &pos, tau)?;
            }
            let dkl = &detectors[1];
            let neg: Vec<f64> = ctx
                .scores
                .iter()
                .filter(|s| s.detector == dkl.name() && s.transform == dkl.transform_label() && !s.positive)
                .map(|s| s.score)
                .collect();
            let nat: Vec<f64> = ctx
                .scores
                .iter()
                .filter(|s| s.detector == dkl.name() && s.transform == dkl.transform_label() && s.positive)
                .map(|s| s.score)
                .collect();
            histograms = dkl_histograms(dkl, &neg, &nat, &[], cfg.histogram_bins)?;
        }
    }

    let rows = aggregate(&ctx.keys, &ctx.scores, &ctx.attacks)?;
    let mut config = serde_json::to_value(cfg)?;
    config["transforms"] = serde_json::to_value(&transforms)?;
    config["temperatures"] = serde_json::to_value(&temps)?;
    config["classifier"] = serde_json::to_value(classifier.config())?;
    let report = EvalReport {
        schema_version: REPORT_SCHEMA_VERSION,
        experiment_id: format!("{suite}-s{}", cfg.seed),
        suite: suite.to_string(),
        seed: cfg.seed,
        config,
        rows,
        runtime_secs: start.elapsed().as_secs_f64(),
    };
    Ok(SuiteOutput {
        report,
        keys: ctx.keys,
        scores: ctx.scores,
        attacks: ctx.attacks,
        histograms,
        results,
    })
}

fn dkl_histograms(
    kind: &DetectorKind,
    correct: &[f64],
    natural: &[f64],
    adversarial: &[f64],
    bins: usize,
) -> Result<Vec<(String, Histogram)>> {
    let mut groups: Vec<(&str, &[f64])> = Vec::new();
    for (name, s) in [("correct", correct), ("natural-error", natural), ("adversarial", adversarial)] {
        if !s.is_empty() {
            groups.push((name, s));
        }
    }
    if groups.is_empty() {
        return Ok(Vec::new());
    }
    let stem = super::report::detector_slug(kind.name(), &kind.transform_label(), kind.temperature());
    Ok(vec![
        (format!("hist_{stem}"), score_histogram(&groups, bins, false)?),
        (format!("hist_{stem}_log"), score_histogram(&groups, bins, true)?),
    ])
}

impl SuiteOutput {
    /// Writes `report.json`, `timing.json`, `scores.csv`, `attacks.csv`,
    /// `roc_<detector>.csv` and histogram CSV/SVG files into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let report_path = dir.join("report.json");
        std::fs::write(&report_path, self.report.to_json()?).map_err(|e| Error::io(&report_path, e))?;
        let timing = serde_json::json!({ "runtime_secs": self.report.runtime_secs });
        let timing_path = dir.join("timing.json");
        std::fs::write(&timing_path, serde_json::to_string_pretty(&timing)? + "\n")
            .map_err(|e| Error::io(&timing_path, e))?;
        write_csv(&dir.join("scores.csv"), &self.scores)?;
        write_csv(&dir.join("attacks.csv"), &self.attacks)?;
        write_roc_files(dir, &self.keys, &self.scores)?;
        for (stem, h) in &self.histograms {
            h.write_csv(&dir.join(format!("{stem}.csv")))?;
            h.write_svg(&dir.join(format!("{stem}.svg")), stem)?;
        }
        Ok(())
    }
}

/// Rebuilds the report rows of an output directory from its CSV tables.
pub fn recompute_rows(dir: &Path) -> Result<Vec<ReportRow>> {
    let report = EvalReport::load(&dir.join("report.json"))?;
    let scores: Vec<ScoreRow> = read_csv(&dir.join("scores.csv"))?;
    let attacks: Vec<AttackRow> = read_csv(&dir.join("attacks.csv"))?;
    let keys: Vec<RowKey> = report.rows.iter().map(|r| r.key.clone()).collect();
    aggregate(&keys, &scores, &attacks)
}

/// A suite run from checkpoints on disk.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSpec {
    pub suite: Suite,
    pub dataset: DatasetSpec,
    pub classifier: PathBuf,
    pub mlp: Option<PathBuf>,
    pub out_dir: PathBuf,
    pub experiment_id: Option<String>,
    pub config: SuiteConfig,
}

/// Loads the checkpoints and data, runs the suite and writes its outputs to
/// `<out_dir>/<experiment-id>/`.
pub fn run_experiment(spec: &ExperimentSpec) -> Result<EvalReport> {
    if !spec.classifier.exists() {
        return Err(Error::Config(format!(
            "classifier checkpoint {} does not exist",
            spec.classifier.display()
        )));
    }
    let classifier = Classifier::load(&spec.classifier)?;
    let mlp = spec.mlp.as_deref().map(MlpModel::load).transpose()?;
    if spec.dataset.num_classes() != classifier.num_classes() {
        return Err(Error::Config(format!(
            "dataset has {} classes but the classifier has {}",
            spec.dataset.num_classes(),
            classifier.num_classes()
        )));
    }
    let (images, split) = spec.dataset.load_split()?;
    let data = SuiteData::from_split(&images, &split);
    let mut out = run_suite(spec.suite, &classifier, mlp.as_ref(), &data, &spec.config)?;
    if let Some(id) = &spec.experiment_id {
        out.report.experiment_id = id.clone();
    }
    out.report.config["dataset"] = serde_json::to_value(&spec.dataset)?;
    let dir = spec.out_dir.join(&out.report.experiment_id);
    out.write(&dir)?;
    Ok(out.report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::classifier::{ClassifierConfig, TrainConfig};
    use crate::data::DataSource;

    fn fixture() -> (Vec<LabeledImage>, crate::data::DatasetSplit, Classifier) {
        let spec = DatasetSpec {
            source: DataSource::Synthetic {
                count: 400,
                num_classes: 4,
                image_size: 16,
            },
            seed: 3,
            fractions: (0.5, 0.2, 0.3),
        };
        let (images, split) = spec.load_split().unwrap();
        let mut cfg = ClassifierConfig::new(4, 3, 16);
        cfg.conv1 = 4;
        cfg.conv2 = 8;
        cfg.hidden = 16;
        let mut m = Classifier::new(cfg, 2).unwrap();
        let train = select(&images, &split.train);
        let tc = TrainConfig {
            epochs: 3,
            ..TrainConfig::default()
        };
        m.train(&train, &tc, None).unwrap();
        (images, split, m)
    }

    fn small() -> SuiteConfig {
        SuiteConfig {
            n_eval: 60,
            n_attack: 3,
            confidences: vec![0.0, 4.0],
            temperatures: Some(vec![1.0, 0.5]),
            attack: AttackConfig {
                iterations: 20,
                binary_search_steps: 2,
                initial_c: 0.1,
                ..AttackConfig::default()
            },
            dropout_passes: 4,
            mlp: MlpConfig {
                epochs: 2,
                ..MlpConfig::default()
            },
            ..SuiteConfig::default()
        }
    }

    #[test]
    fn suite_names_roundtrip() {
        for s in Suite::ALL {
            assert_eq!(s.to_string().parse::<Suite>().unwrap(), s);
        }
        assert!("sweep".parse::<Suite>().is_err());
    }

    #[test]
    fn config_keys_and_validation() {
        let kv = KvConfig::parse("k_grid = 0, 8\ntransforms = hflip,shift:1,0\ntemperatures = 2\nn_attack = 7\n").unwrap();
        let c = SuiteConfig::from_config(&kv).unwrap();
        assert_eq!(c.confidences, vec![0.0, 8.0]);
        assert_eq!(c.transforms.as_ref().unwrap().len(), 2);
        assert_eq!(c.n_attack, 7);
        assert!(c.attack.targeted);
        assert!(c.validate(Suite::KdTemperature).is_ok());
        let bad = SuiteConfig {
            temperatures: Some(vec![0.0]),
            ..SuiteConfig::default()
        };
        assert!(bad.validate(Suite::KdTemperature).is_err());
        let fgsm = SuiteConfig {
            attack: AttackConfig {
                kind: AttackKind::Fgsm,
                ..AttackConfig::default()
            },
            ..SuiteConfig::default()
        };
        assert!(fgsm.validate(Suite::UdSweep).is_err());
        assert!(fgsm.validate(Suite::NaturalErrors).is_ok());
    }

    #[test]
    fn suites_are_deterministic_and_recomputable() {
        let (images, split, m) = fixture();
        let data = SuiteData::from_split(&images, &split);
        let cfg = small();
        for suite in Suite::ALL {
            let a = run_suite(suite, &m, None, &data, &cfg).unwrap();
            let b = run_suite(suite, &m, None, &data, &cfg).unwrap();
            assert_eq!(a.report.to_json().unwrap(), b.report.to_json().unwrap(), "{suite}");
            assert!(!a.report.rows.is_empty());
            let dir = tempfile::tempdir().unwrap();
            a.write(dir.path()).unwrap();
            assert_eq!(recompute_rows(dir.path()).unwrap(), a.report.rows, "{suite}");
            assert!(dir.path().join("report.json").exists());
            assert!(dir.path().join("timing.json").exists());
        }
    }

    #[test]
    fn kd_groups_cover_every_transform_and_temperature() {
        let (images, split, m) = fixture();
        let data = SuiteData::from_split(&images, &split);
        let mut cfg = small();
        cfg.transforms = Some(vec![TransformSpec::HFlip]);
        let out = run_suite(Suite::KdTemperature, &m, None, &data, &cfg).unwrap();
        for t in ["1", "0.5"] {
            let g = format!("kd/hflip/T={t}");
            let row = out.report.rows.iter().find(|r| r.key.group == g).expect("group row");
            assert_eq!(row.n_attacks, cfg.n_attack);
            assert!(row.key.threshold.is_some());
            let b = row.bypass_rate.unwrap();
            assert!((0.0..=1.0).contains(&b));
        }
    }
}
