//! Offline evaluation, forgetting curves, and synthetic students.

pub mod curve;
pub mod metrics;
pub mod report;
pub mod synth;

pub use curve::{forgetting_curve, CurvePoint, ForgettingCurve, CURVE_DAYS};
pub use metrics::{accuracy_splits, auc, ece, MetricError};
pub use report::{evaluate, score_records, EvalReport, PartitionMetrics, ScoredRow};
pub use synth::{generate, SyntheticData, SyntheticSpec};
