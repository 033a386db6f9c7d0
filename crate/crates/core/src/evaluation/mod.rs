//! Metrics, reports and the canned experiment suites.

pub mod histogram;
pub mod metrics;
pub mod report;
pub mod suites;

pub use histogram::{score_histogram, Histogram};
pub use metrics::{auroc_split, bypass_rate, mann_whitney_auroc, roc_auroc, roc_curve, summarize, RocCurve, Summary};
pub use report::{AttackRow, EvalReport, ReportRow, RowKey, ScoreRow, REPORT_SCHEMA_VERSION};
pub use suites::{
    detector_scores, recompute_rows, run_experiment, run_suite, DetectorKind, ExperimentSpec, Suite, SuiteConfig,
    SuiteData, SuiteOutput,
};
