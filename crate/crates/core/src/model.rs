//! The student-model interface shared by baselines, the neural classifier,
//! scheduling policies, and evaluation.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{StudyHistory, StudyRecord, Timestamp};
use crate::features::{CardStats, FeatureContext, UserReplay, UserTotals};
use crate::retrieval::RetrievalError;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
    #[error("non-finite activation in {0}")]
    NonfiniteActivation(&'static str),
    #[error("input width {found} does not match network width {expected}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error(transparent)]
    Feature(#[from] crate::features::FeatureError),
    #[error("study log is not in chronological order at record {index}")]
    UnsortedLog { index: usize },
}

/// Probability that the student answers a card correctly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecallPrediction {
    pub probability: f64,
    pub model_tag: String,
}

impl RecallPrediction {
    pub fn new(probability: f64, model_tag: impl Into<String>) -> Self {
        Self {
            probability: probability.clamp(0.0, 1.0),
            model_tag: model_tag.into(),
        }
    }
}

/// What a student model may look at: one user's history, corpus-wide card
/// statistics, and optional hypothetical or frozen overrides.
///
/// Only records strictly before the query instant are visible.
#[derive(Debug, Clone, Copy)]
pub struct StudentView<'a> {
    pub history: &'a StudyHistory,
    pub stats: &'a CardStats,
    /// A hypothetical record appended after `history`; it is never stored.
    pub extra: Option<&'a StudyRecord>,
    pub frozen_user: Option<UserTotals>,
}

impl<'a> StudentView<'a> {
    pub fn new(history: &'a StudyHistory, stats: &'a CardStats) -> Self {
        Self {
            history,
            stats,
            extra: None,
            frozen_user: None,
        }
    }

    pub fn with_extra(self, extra: &'a StudyRecord) -> Self {
        Self { extra: Some(extra), ..self }
    }

    pub fn with_frozen_user(self, totals: Option<UserTotals>) -> Self {
        Self { frozen_user: totals, ..self }
    }

    /// Visible records, oldest first.
    pub fn records(&self, now: Timestamp) -> impl Iterator<Item = &'a StudyRecord> {
        let extra = self.extra.filter(|r| r.timestamp < now);
        self.history.before(now).iter().chain(extra)
    }

    pub fn replay(&self, now: Timestamp) -> UserReplay {
        UserReplay::from_records(self.records(now))
    }

    pub fn feature_context(&self) -> FeatureContext<'a> {
        FeatureContext {
            stats: self.stats,
            extra: self.extra,
            frozen_user: self.frozen_user,
        }
    }

    pub fn seen(&self, card: &str, now: Timestamp) -> bool {
        self.records(now).any(|r| r.card_id.as_str() == card)
    }
}

pub trait StudentModel: Send + Sync {
    fn tag(&self) -> &str;

    fn predict(&self, view: &StudentView<'_>, card: &str, now: Timestamp) -> Result<RecallPrediction, ModelError>;
}

impl<M: StudentModel + ?Sized> StudentModel for Box<M> {
    fn tag(&self) -> &str {
        (**self).tag()
    }

    fn predict(&self, view: &StudentView<'_>, card: &str, now: Timestamp) -> Result<RecallPrediction, ModelError> {
        (**self).predict(view, card, now)
    }
}

impl<M: StudentModel + ?Sized> StudentModel for std::sync::Arc<M> {
    fn tag(&self) -> &str {
        (**self).tag()
    }

    fn predict(&self, view: &StudentView<'_>, card: &str, now: Timestamp) -> Result<RecallPrediction, ModelError> {
        (**self).predict(view, card, now)
    }
}
