//! Teaching policies: pick the next cards from student-model predictions.

use std::cmp::Ordering;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{CardId, StudyRecord, Timestamp, SECONDS_PER_DAY};
use crate::model::{ModelError, StudentModel, StudentView};

#[derive(Debug, Error)]
pub enum PolicyError {
    #[error("no candidate cards to schedule")]
    EmptyCandidates,
    #[error("invalid policy configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PolicyKind {
    /// Cards whose recall is closest to a retention target.
    Threshold,
    /// Cards whose study most raises recall one interval later.
    Delta,
}

impl FromStr for PolicyKind {
    type Err = PolicyError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "threshold" => Ok(Self::Threshold),
            "delta" => Ok(Self::Delta),
            other => Err(PolicyError::InvalidConfig(format!("unknown policy {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PolicyConfig {
    pub kind: PolicyKind,
    pub delta_interval_seconds: i64,
    pub n_cards: usize,
    pub retention_threshold: f64,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self {
            kind: PolicyKind::Delta,
            delta_interval_seconds: SECONDS_PER_DAY,
            n_cards: 10,
            retention_threshold: 0.9,
        }
    }
}

impl PolicyConfig {
    pub fn validate(&self) -> Result<(), PolicyError> {
        if !(self.retention_threshold > 0.0 && self.retention_threshold < 1.0) {
            return Err(PolicyError::InvalidConfig("retention threshold must lie in (0, 1)".into()));
        }
        if self.delta_interval_seconds <= 0 {
            return Err(PolicyError::InvalidConfig("delta interval must be positive".into()));
        }
        if self.n_cards == 0 {
            return Err(PolicyError::InvalidConfig("n_cards must be positive".into()));
        }
        Ok(())
    }
}

/// Expected gain in later recall from studying a card now.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeltaScore {
    pub card_id: CardId,
    pub score: f64,
    pub p_now: f64,
    pub p_later_correct: f64,
    pub p_later_incorrect: f64,
    pub p_later_no_study: f64,
}

/// `p_c * p + p_i * (1 - p) - p_n`, written so that equal branch
/// probabilities give exactly 0.
pub fn delta_formula(p_now: f64, p_correct: f64, p_incorrect: f64, p_no_study: f64) -> f64 {
    (p_correct - p_no_study) * p_now + (p_incorrect - p_no_study) * (1.0 - p_now)
}

/// Scores `card` by querying the model at `now` and at `now + interval`
/// with and without a hypothetical study at `now`. The view is not modified.
pub fn delta_score(model: &dyn StudentModel, view: &StudentView<'_>, card: &str, now: Timestamp, interval_seconds: i64) -> Result<DeltaScore, ModelError> {
    let later = now.plus_seconds(interval_seconds);
    let p_now = model.predict(view, card, now)?.probability;
    let p_later_no_study = model.predict(view, card, later)?.probability;
    let branch = |correct: bool| -> Result<f64, ModelError> {
        let hypothetical = StudyRecord::new(view.history.user_id().clone(), card, now, correct);
        Ok(model.predict(&view.with_extra(&hypothetical), card, later)?.probability)
    };
    let p_later_correct = branch(true)?;
    let p_later_incorrect = branch(false)?;
    Ok(DeltaScore {
        card_id: CardId::new(card),
        score: delta_formula(p_now, p_later_correct, p_later_incorrect, p_later_no_study),
        p_now,
        p_later_correct,
        p_later_incorrect,
        p_later_no_study,
    })
}

/// One selected card. `priority` is the delta score or the distance to the
/// retention threshold, depending on the policy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduledCard {
    pub card_id: CardId,
    pub probability: f64,
    pub priority: f64,
}

fn by_id<'a>(a: &'a CardId, b: &'a CardId) -> Ordering {
    a.cmp(b)
}

/// The `n_cards` candidates with the highest delta scores, best first; ties by card id.
pub fn schedule_delta(
    model: &dyn StudentModel,
    view: &StudentView<'_>,
    candidates: &[CardId],
    now: Timestamp,
    config: &PolicyConfig,
) -> Result<Vec<DeltaScore>, PolicyError> {
    if candidates.is_empty() {
        return Err(PolicyError::EmptyCandidates);
    }
    let mut scores = candidates
        .iter()
        .map(|c| delta_score(model, view, c.as_str(), now, config.delta_interval_seconds))
        .collect::<Result<Vec<_>, _>>()?;
    scores.sort_by(|a, b| b.score.total_cmp(&a.score).then_with(|| by_id(&a.card_id, &b.card_id)));
    scores.truncate(config.n_cards);
    Ok(scores)
}

/// The `n_cards` candidates whose recall is nearest the retention threshold; ties by card id.
pub fn schedule_threshold(
    model: &dyn StudentModel,
    view: &StudentView<'_>,
    candidates: &[CardId],
    now: Timestamp,
    config: &PolicyConfig,
) -> Result<Vec<ScheduledCard>, PolicyError> {
    if candidates.is_empty() {
        return Err(PolicyError::EmptyCandidates);
    }
    let mut ranked = candidates
        .iter()
        .map(|c| {
            let p = model.predict(view, c.as_str(), now)?.probability;
            Ok(ScheduledCard {
                card_id: c.clone(),
                probability: p,
                priority: (p - config.retention_threshold).abs(),
            })
        })
        .collect::<Result<Vec<_>, ModelError>>()?;
    ranked.sort_by(|a, b| a.priority.total_cmp(&b.priority).then_with(|| by_id(&a.card_id, &b.card_id)));
    ranked.truncate(config.n_cards);
    Ok(ranked)
}

/// Dispatches on `config.kind`.
pub fn schedule(
    model: &dyn StudentModel,
    view: &StudentView<'_>,
    candidates: &[CardId],
    now: Timestamp,
    config: &PolicyConfig,
) -> Result<Vec<ScheduledCard>, PolicyError> {
    config.validate()?;
    match config.kind {
        PolicyKind::Threshold => schedule_threshold(model, view, candidates, now, config),
        PolicyKind::Delta => Ok(schedule_delta(model, view, candidates, now, config)?
            .into_iter()
            .map(|d| ScheduledCard {
                card_id: d.card_id,
                probability: d.p_now,
                priority: d.score,
            })
            .collect()),
    }
}

/// Test doubles shared with integration tests.
pub mod mock {
    use std::collections::HashMap;

    use super::*;
    use crate::model::RecallPrediction;

    /// Per-card branch probabilities `(p_now, p_correct, p_incorrect, p_no_study)`,
    /// keyed on whether the query is at `now` and on the hypothetical record.
    #[derive(Debug, Clone)]
    pub struct BranchModel {
        pub now: Timestamp,
        pub table: HashMap<String, [f64; 4]>,
    }

    impl StudentModel for BranchModel {
        fn tag(&self) -> &str {
            "branch-mock"
        }

        fn predict(&self, view: &StudentView<'_>, card: &str, now: Timestamp) -> Result<RecallPrediction, ModelError> {
            let row = self.table.get(card).copied().unwrap_or([0.0; 4]);
            let p = match view.extra {
                Some(r) if r.is_correct() => row[1],
                Some(_) => row[2],
                None if now == self.now => row[0],
                None => row[3],
            };
            Ok(RecallPrediction::new(p, self.tag()))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::mock::BranchModel;
    use super::*;
    use crate::domain::StudyHistory;
    use crate::features::CardStats;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const NOW: Timestamp = Timestamp(1_000_000);

    fn ids(v: &[&str]) -> Vec<CardId> {
        v.iter().map(|s| CardId::new(*s)).collect()
    }

    fn model(rows: &[(&str, [f64; 4])]) -> BranchModel {
        BranchModel {
            now: NOW,
            table: rows.iter().map(|(k, v)| (k.to_string(), *v)).collect(),
        }
    }

    fn fixture() -> (StudyHistory, CardStats) {
        let mut h = StudyHistory::new("u");
        h.push(StudyRecord::new("u", "A", Timestamp(10), true)).unwrap();
        let stats = CardStats::from_records(h.records());
        (h, stats)
    }

    #[test]
    fn worked_delta_example() {
        let (h, stats) = fixture();
        let m = model(&[("A", [0.6, 0.9, 0.5, 0.4])]);
        let d = delta_score(&m, &StudentView::new(&h, &stats), "A", NOW, SECONDS_PER_DAY).unwrap();
        assert!((d.score - 0.34).abs() < 1e-12);
        assert_eq!((d.p_now, d.p_later_correct, d.p_later_incorrect, d.p_later_no_study), (0.6, 0.9, 0.5, 0.4));
    }

    #[test]
    fn outcome_insensitive_model_scores_exactly_zero() {
        let (h, stats) = fixture();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..200 {
            let v = rng.random_range(0.0..1.0);
            let m = model(&[("A", [rng.random_range(0.0..1.0), v, v, v])]);
            assert_eq!(delta_score(&m, &StudentView::new(&h, &stats), "A", NOW, SECONDS_PER_DAY).unwrap().score, 0.0);
        }
    }

    #[test]
    fn scoring_leaves_history_untouched() {
        let (h, stats) = fixture();
        let before = h.clone();
        let m = model(&[("A", [0.2, 0.8, 0.1, 0.3])]);
        delta_score(&m, &StudentView::new(&h, &stats), "A", NOW, SECONDS_PER_DAY).unwrap();
        assert_eq!(h, before);
        assert_eq!(stats.len(), 1);
    }

    #[test]
    fn delta_schedule_examples() {
        let (h, stats) = fixture();
        let view = StudentView::new(&h, &stats);
        let cfg = PolicyConfig {
            n_cards: 2,
            ..Default::default()
        };
        let m = model(&[("only", [0.0, 0.0, 0.0, 0.9])]);
        let one = schedule_delta(&m, &view, &ids(&["only"]), NOW, &cfg).unwrap();
        assert_eq!(one[0].card_id.as_str(), "only");
        // Scores A 0.3, B 0.1, C 0.3 with p_now = 1.
        let m = model(&[("A", [1.0, 0.8, 0.0, 0.5]), ("B", [1.0, 0.6, 0.0, 0.5]), ("C", [1.0, 0.8, 0.0, 0.5])]);
        let picked = schedule_delta(&m, &view, &ids(&["C", "B", "A"]), NOW, &cfg).unwrap();
        let picked: Vec<&str> = picked.iter().map(|d| d.card_id.as_str()).collect();
        assert_eq!(picked, ["A", "C"]);
        assert!(matches!(schedule_delta(&m, &view, &[], NOW, &cfg), Err(PolicyError::EmptyCandidates)));
    }

    #[test]
    fn delta_schedule_matches_sort_oracle() {
        let (h, stats) = fixture();
        let view = StudentView::new(&h, &stats);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let names: Vec<String> = (0..50).map(|i| format!("c{i:02}")).collect();
        let rows: Vec<(&str, [f64; 4])> = names.iter().map(|n| (n.as_str(), [0.5, rng.random_range(0.0..1.0), 0.5, 0.5])).collect();
        let m = model(&rows);
        let cfg = PolicyConfig {
            n_cards: 50,
            ..Default::default()
        };
        let cands: Vec<CardId> = names.iter().map(|n| CardId::new(n.as_str())).collect();
        let got: Vec<String> = schedule_delta(&m, &view, &cands, NOW, &cfg)
            .unwrap()
            .into_iter()
            .map(|d| d.card_id.to_string())
            .collect();
        let mut oracle: Vec<(f64, String)> = rows.iter().map(|(n, r)| (delta_formula(r[0], r[1], r[2], r[3]), n.to_string())).collect();
        oracle.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
        assert_eq!(got, oracle.into_iter().map(|x| x.1).collect::<Vec<_>>());
    }

    #[test]
    fn threshold_schedule_examples() {
        let (h, stats) = fixture();
        let view = StudentView::new(&h, &stats);
        let cfg = PolicyConfig {
            kind: PolicyKind::Threshold,
            n_cards: 2,
            ..Default::default()
        };
        let m = model(&[("A", [0.5; 4]), ("B", [0.9; 4]), ("C", [0.95; 4])]);
        let got = schedule(&m, &view, &ids(&["A", "B", "C"]), NOW, &cfg).unwrap();
        assert_eq!(got[0].card_id.as_str(), "B");
        assert_eq!(got[1].card_id.as_str(), "C");
        let zeros = model(&[]);
        assert_eq!(schedule(&zeros, &view, &ids(&["x", "y", "z"]), NOW, &cfg).unwrap().len(), 2);
    }

    #[test]
    fn threshold_schedule_matches_distance_oracle() {
        let (h, stats) = fixture();
        let view = StudentView::new(&h, &stats);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let names: Vec<String> = (0..40).map(|i| format!("c{i:02}")).collect();
        let rows: Vec<(&str, [f64; 4])> = names.iter().map(|n| (n.as_str(), [rng.random_range(0.0..1.0); 4])).collect();
        let m = model(&rows);
        let cfg = PolicyConfig {
            kind: PolicyKind::Threshold,
            n_cards: 10,
            ..Default::default()
        };
        let cands: Vec<CardId> = names.iter().map(|n| CardId::new(n.as_str())).collect();
        let got: Vec<String> = schedule(&m, &view, &cands, NOW, &cfg)
            .unwrap()
            .into_iter()
            .map(|d| d.card_id.to_string())
            .collect();
        let mut oracle: Vec<(f64, String)> = rows.iter().map(|(n, r)| ((r[0] - 0.9).abs(), n.to_string())).collect();
        oracle.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
        assert_eq!(got, oracle.into_iter().take(10).map(|x| x.1).collect::<Vec<_>>());
    }

    #[test]
    fn invalid_configs_are_rejected() {
        for cfg in [
            PolicyConfig {
                retention_threshold: 1.0,
                ..Default::default()
            },
            PolicyConfig {
                delta_interval_seconds: 0,
                ..Default::default()
            },
            PolicyConfig {
                n_cards: 0,
                ..Default::default()
            },
        ] {
            assert!(matches!(cfg.validate(), Err(PolicyError::InvalidConfig(_))));
        }
        assert!("delta".parse::<PolicyKind>().is_ok());
        assert!("greedy".parse::<PolicyKind>().is_err());
    }

    proptest! {
        #[test]
        fn zero_recall_card_with_best_score_is_selected(
            others in proptest::collection::vec((0.0f64..1.0, 0.0f64..1.0, 0.0f64..1.0, 0.0f64..1.0), 1..30),
            n in 1usize..10,
        ) {
            let (h, stats) = fixture();
            let view = StudentView::new(&h, &stats);
            let names: Vec<String> = (0..others.len()).map(|i| format!("o{i:02}")).collect();
            let mut rows: Vec<(&str, [f64; 4])> = names.iter().zip(&others).map(|(n, o)| (n.as_str(), [o.0, o.1, o.2, o.3])).collect();
            // p_now = 0 and a score of 1, above any other card's.
            rows.push(("zzz", [0.0, 0.0, 1.0, 0.0]));
            let m = model(&rows);
            let cands: Vec<CardId> = rows.iter().map(|(n, _)| CardId::new(*n)).collect();
            let cfg = PolicyConfig { n_cards: n, ..Default::default() };
            let got = schedule_delta(&m, &view, &cands, NOW, &cfg).unwrap();
            prop_assert!(got.iter().any(|d| d.card_id.as_str() == "zzz"));
        }

        #[test]
        fn shifting_study_branches_shifts_scores(p in 0.0f64..1.0, pc in 0.0f64..0.5, pi in 0.0f64..0.5, pn in 0.0f64..1.0, c in 0.0f64..0.5) {
            let base = delta_formula(p, pc, pi, pn);
            let shifted = delta_formula(p, pc + c, pi + c, pn);
            prop_assert!((shifted - base - c).abs() < 1e-12);
        }
    }
}
