//! Per-image tables, aggregate rows and the on-disk report layout.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::metrics::{mann_whitney_auroc, roc_curve, summarize, RocCurve};
use crate::attacks::AttackResult;
use crate::error::{Error, Result};

/// Bumped whenever `report.json` changes shape.
pub const REPORT_SCHEMA_VERSION: u32 = 1;

/// One detector score for one image. `positive` marks images that should be
/// rejected (natural errors or adversarial images that fool the classifier).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreRow {
    pub id: u64,
    pub label: usize,
    pub predicted: usize,
    pub score: f64,
    pub detector: String,
    pub transform: String,
    #[serde(rename = "T")]
    pub temperature: f64,
    pub group: String,
    pub positive: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackRow {
    pub group: String,
    pub id: u64,
    pub label: usize,
    pub target: Option<usize>,
    pub predicted: usize,
    pub success: bool,
    pub l2: f64,
    pub linf: f64,
    pub iterations: usize,
    pub c: Option<f64>,
    pub detector_score: Option<f64>,
}

impl AttackRow {
    pub fn new(group: &str, r: &AttackResult) -> Self {
        Self {
            group: group.to_string(),
            id: r.id,
            label: r.label,
            target: r.target,
            predicted: r.predicted,
            success: r.success,
            l2: r.l2,
            linf: r.linf,
            iterations: r.iterations,
            c: r.c,
            detector_score: r.detector_score,
        }
    }
}

/// Which slice of the per-image tables a report row summarizes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RowKey {
    pub group: String,
    pub detector: String,
    pub transform: String,
    #[serde(rename = "T")]
    pub temperature: f64,
    /// C&W confidence of the group's attacks, if any.
    pub k: Option<f64>,
    /// Detection threshold at the target FPR, when one applies.
    pub threshold: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    #[serde(flatten)]
    pub key: RowKey,
    pub auroc: Option<f64>,
    /// Attacks whose image fools the classifier and scores strictly below
    /// `threshold`, over all attack attempts in the group.
    pub bypass_rate: Option<f64>,
    pub n_positive: usize,
    pub n_negative: usize,
    pub n_attacks: usize,
    pub n_success: usize,
    pub mean_l2: Option<f64>,
    pub median_l2: Option<f64>,
    pub mean_linf: Option<f64>,
    pub median_linf: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub schema_version: u32,
    pub experiment_id: String,
    pub suite: String,
    pub seed: u64,
    pub config: serde_json::Value,
    pub rows: Vec<ReportRow>,
    /// Wall-clock seconds; kept out of `report.json` so reruns compare
    /// byte for byte.
    #[serde(skip)]
    pub runtime_secs: f64,
}

impl EvalReport {
    pub fn row(&self, group: &str, detector: &str, transform: &str) -> Option<&ReportRow> {
        self.rows
            .iter()
            .find(|r| r.key.group == group && r.key.detector == detector && r.key.transform == transform)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let report: Self = serde_json::from_str(&text)?;
        if report.schema_version != REPORT_SCHEMA_VERSION {
            return Err(Error::format(
                path.display().to_string(),
                format!("report schema {} is not {REPORT_SCHEMA_VERSION}", report.schema_version),
            ));
        }
        Ok(report)
    }
}

fn select<'a>(scores: &'a [ScoreRow], key: &RowKey) -> impl Iterator<Item = &'a ScoreRow> + 'a {
    let key = key.clone();
    scores.iter().filter(move |s| {
        s.group == key.group && s.detector == key.detector && s.transform == key.transform && s.temperature == key.temperature
    })
}

fn finite(v: f64) -> Option<f64> {
    v.is_finite().then_some(v)
}

/// Builds one report row per key purely from the per-image tables.
pub fn aggregate(keys: &[RowKey], scores: &[ScoreRow], attacks: &[AttackRow]) -> Result<Vec<ReportRow>> {
    keys.iter()
        .map(|key| {
            let labeled: Vec<(f64, bool)> = select(scores, key).map(|s| (s.score, s.positive)).collect();
            let n_positive = labeled.iter().filter(|(_, p)| *p).count();
            let n_negative = labeled.len() - n_positive;
            let auroc = if n_positive > 0 && n_negative > 0 {
                Some(mann_whitney_auroc(&labeled)?)
            } else {
                None
            };
            let group: Vec<&AttackRow> = attacks.iter().filter(|a| a.group == key.group).collect();
            let ok: Vec<&&AttackRow> = group.iter().filter(|a| a.success).collect();
            let l2 = summarize(&ok.iter().map(|a| a.l2).collect::<Vec<_>>());
            let linf = summarize(&ok.iter().map(|a| a.linf).collect::<Vec<_>>());
            let bypass_rate = match key.threshold {
                Some(tau) if !group.is_empty() => {
                    let below = labeled.iter().filter(|(s, p)| *p && *s < tau).count();
                    Some(below as f64 / group.len() as f64)
                }
                _ => None,
            };
            Ok(ReportRow {
                key: key.clone(),
                auroc,
                bypass_rate,
                n_positive,
                n_negative,
                n_attacks: group.len(),
                n_success: ok.len(),
                mean_l2: finite(l2.mean),
                median_l2: finite(l2.median),
                mean_linf: finite(linf.mean),
                median_linf: finite(linf.median),
            })
        })
        .collect()
}

/// ROC curve for one report row, when both classes are present.
pub fn row_roc(key: &RowKey, scores: &[ScoreRow]) -> Result<Option<RocCurve>> {
    let labeled: Vec<(f64, bool)> = select(scores, key).map(|s| (s.score, s.positive)).collect();
    if labeled.iter().any(|(_, p)| *p) && labeled.iter().any(|(_, p)| !*p) {
        roc_curve(&labeled).map(Some)
    } else {
        Ok(None)
    }
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(std::io::BufWriter::new(file));
    for r in rows {
        w.serialize(r).map_err(|e| Error::format(path.display().to_string(), e.to_string()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_csv<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::format(path.display().to_string(), e.to_string()))?;
    r.deserialize()
        .map(|row| row.map_err(|e| Error::format(path.display().to_string(), e.to_string())))
        .collect()
}

/// File-name stem for a `(detector, transform, T)` combination.
pub fn detector_slug(detector: &str, transform: &str, temperature: f64) -> String {
    let mut s = detector.to_string();
    if !transform.is_empty() {
        s.push('_');
        s.push_str(transform);
    }
    if detector.starts_with("dkl") {
        s.push_str(&format!("_T{temperature}"));
    }
    s.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '.' || c == '-' { c } else { '_' })
        .collect()
}

#[derive(Serialize)]
struct RocPoint<'a> {
    group: &'a str,
    fpr: f64,
    tpr: f64,
    threshold: Option<f64>,
}

/// Writes `roc_<detector>.csv` files, one per detector with every group's
/// curve inside.
pub fn write_roc_files(dir: &Path, keys: &[RowKey], scores: &[ScoreRow]) -> Result<Vec<String>> {
    let mut files: BTreeMap<String, Vec<(String, RocCurve)>> = BTreeMap::new();
    for key in keys {
        if let Some(curve) = row_roc(key, scores)? {
            files
                .entry(detector_slug(&key.detector, &key.transform, key.temperature))
                .or_default()
                .push((key.group.clone(), curve));
        }
    }
    let mut names = Vec::new();
    for (slug, curves) in files {
        let mut points = Vec::new();
        for (group, curve) in &curves {
            for (i, &(fpr, tpr)) in curve.points.iter().enumerate() {
                points.push(RocPoint {
                    group,
                    fpr,
                    tpr,
                    threshold: i.checked_sub(1).map(|j| curve.thresholds[j]),
                });
            }
        }
        let name = format!("roc_{slug}.csv");
        write_csv(&dir.join(&name), &points)?;
        names.push(name);
    }
    Ok(names)
}
