use std::fmt::Write as _;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use super::metrics::{accuracy_splits, auc, ece, ACCURACY_CUTOFF, DEFAULT_BINS};
use crate::dataset::StudyLog;
use crate::domain::StudyHistory;
use crate::model::{ModelError, StudentModel, StudentView};

/// One scored evaluation record.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoredRow {
    pub score: f64,
    pub label: bool,
    pub seen: bool,
}

/// Metrics of one partition. A metric is `None` when it is undefined for the
/// partition (no rows, or a single label class for AUC).
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct PartitionMetrics {
    pub count: usize,
    pub positives: usize,
    pub auc: Option<f64>,
    pub ece: Option<f64>,
    pub acc_when_correct: Option<f64>,
    pub acc_when_incorrect: Option<f64>,
}

impl PartitionMetrics {
    pub fn compute(scores: &[f64], labels: &[bool]) -> Self {
        let (acc_when_correct, acc_when_incorrect) = accuracy_splits(scores, labels, ACCURACY_CUTOFF).unwrap_or((None, None));
        Self {
            count: scores.len(),
            positives: labels.iter().filter(|&&l| l).count(),
            auc: auc(scores, labels).ok(),
            ece: ece(scores, labels, DEFAULT_BINS).ok(),
            acc_when_correct,
            acc_when_incorrect,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub model_tag: String,
    pub seen: PartitionMetrics,
    pub unseen: PartitionMetrics,
}

impl EvalReport {
    pub fn from_rows(model_tag: impl Into<String>, rows: &[ScoredRow]) -> Self {
        let part = |seen: bool| {
            let (scores, labels): (Vec<f64>, Vec<bool>) = rows.iter().filter(|r| r.seen == seen).map(|r| (r.score, r.label)).unzip();
            PartitionMetrics::compute(&scores, &labels)
        };
        Self {
            model_tag: model_tag.into(),
            seen: part(true),
            unseen: part(false),
        }
    }

    /// `key=value` lines; undefined metrics print as `na`.
    pub fn to_kv(&self) -> String {
        let mut s = format!("model={}\n", self.model_tag);
        let opt = |v: Option<f64>| v.map_or_else(|| "na".to_owned(), |x| format!("{x:.6}"));
        for (name, p) in [("seen", &self.seen), ("unseen", &self.unseen)] {
            let _ = writeln!(s, "{name}.count={}", p.count);
            let _ = writeln!(s, "{name}.positives={}", p.positives);
            let _ = writeln!(s, "{name}.auc={}", opt(p.auc));
            let _ = writeln!(s, "{name}.ece={}", opt(p.ece));
            let _ = writeln!(s, "{name}.acc_when_correct={}", opt(p.acc_when_correct));
            let _ = writeln!(s, "{name}.acc_when_incorrect={}", opt(p.acc_when_incorrect));
        }
        s
    }
}

/// Scores `log.records()[range]`, each from its user's point-in-time history.
pub fn score_records(model: &dyn StudentModel, log: &StudyLog, range: Range<usize>) -> Result<Vec<ScoredRow>, ModelError> {
    let empty = StudyHistory::new("");
    log.records()[range]
        .iter()
        .map(|r| {
            let history = log.history(r.user_id.as_str()).unwrap_or(&empty);
            let view = StudentView::new(history, log.stats());
            Ok(ScoredRow {
                score: model.predict(&view, r.card_id.as_str(), r.timestamp)?.probability,
                label: r.is_correct(),
                seen: history.seen_before(r.card_id.as_str(), r.timestamp),
            })
        })
        .collect()
}

/// Metrics on the evaluation split `records[split..]`.
pub fn evaluate(model: &dyn StudentModel, log: &StudyLog, split: usize) -> Result<EvalReport, ModelError> {
    let rows = score_records(model, log, split.min(log.len())..log.len())?;
    Ok(EvalReport::from_rows(model.tag(), &rows))
}
