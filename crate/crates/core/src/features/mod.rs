//! Flashcard-level study-data features computed by replaying a study history.
//!
//! Every feature is evaluated at a query instant `now` and reflects only records
//! strictly before `now`. User-level and user-card aggregates come from the
//! user's own history; card-level aggregates come from a corpus-wide
//! [`CardStats`] timeline, so the same statistics object answers point-in-time
//! queries for any `now`.

mod normalize;
pub mod schedulers;

use std::collections::HashMap;
use std::ops::Index;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{CardId, StudyHistory, StudyRecord, Timestamp};
pub use normalize::{NormalizationStats, StreamingMoments};
pub use schedulers::{LeitnerState, Sm2State};

/// Gap between two studies of one user that starts a new session.
pub const SESSION_GAP_SECONDS: i64 = 30 * 60;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FeatureError {
    #[error("expected {expected} feature slots, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("training split is empty")]
    EmptySplit,
    #[error("unknown feature id {0:?}")]
    UnknownFeature(String),
}

macro_rules! features {
    ($($variant:ident => $id:literal, $column:literal;)*) => {
        /// One slot of the study-data feature vector.
        #[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
        pub enum Feature {
            $($variant,)*
        }

        impl Feature {
            pub const ALL: [Feature; NUM_FEATURES] = [$(Feature::$variant,)*];

            /// Identifier as used in the dataset documentation (e.g. `7.14`).
            pub fn id(self) -> &'static str {
                match self {
                    $(Feature::$variant => $id,)*
                }
            }

            /// Dataset column name.
            pub fn column(self) -> &'static str {
                match self {
                    $(Feature::$variant => $column,)*
                }
            }
        }
    };
}

pub const NUM_FEATURES: usize = 25;

features! {
    IsNewFact => "7.1", "is_new_fact";
    UserNStudyPositive => "7.2", "user_n_study_positive";
    UserNStudyNegative => "7.3", "user_n_study_negative";
    UserNStudyTotal => "7.4", "user_n_study_total";
    CardNStudyPositive => "7.5", "card_n_study_positive";
    CardNStudyNegative => "7.6", "card_n_study_negative";
    CardNStudyTotal => "7.7", "card_n_study_total";
    UsercardNStudyPositive => "7.8", "usercard_n_study_positive";
    UsercardNStudyNegative => "7.9", "usercard_n_study_negative";
    UsercardNStudyTotal => "7.10", "usercard_n_study_total";
    AccUser => "7.11", "acc_user";
    AccCard => "7.12", "acc_card";
    AccUsercard => "7.13", "acc_usercard";
    UsercardDelta => "7.14", "usercard_delta";
    UsercardDeltaPrevious => "7.15", "usercard_delta_previous";
    UsercardPrevResponse => "7.16", "usercard_prev_response";
    LeitnerBox => "7.17", "leitner_box";
    Sm2Efactor => "7.18", "sm2_efactor";
    Sm2Interval => "7.19", "sm2_interval";
    Sm2Repetition => "7.20", "sm2_repetition";
    DeltaToLeitner => "7.21", "delta_to_leitner";
    DeltaToSm2 => "7.22", "delta_to_sm2";
    SessionAccUser => "s.11", "session_acc_user";
    SessionAccCard => "s.12", "session_acc_card";
    SessionAccUsercard => "s.13", "session_acc_usercard";
}

impl Feature {
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_id(id: &str) -> Option<Feature> {
        Feature::ALL.iter().copied().find(|f| f.id() == id || f.column() == id)
    }

    /// Features that change with the query time alone.
    pub fn is_time_derived(self) -> bool {
        matches!(
            self,
            Feature::UsercardDelta
                | Feature::DeltaToLeitner
                | Feature::DeltaToSm2
                | Feature::SessionAccUser
                | Feature::SessionAccCard
                | Feature::SessionAccUsercard
        )
    }
}

/// Raw (un-normalized) feature values, one slot per [`Feature`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector(pub [f64; NUM_FEATURES]);

impl Default for FeatureVector {
    fn default() -> Self {
        FeatureVector([0.0; NUM_FEATURES])
    }
}

impl Index<Feature> for FeatureVector {
    type Output = f64;

    fn index(&self, f: Feature) -> &f64 {
        &self.0[f.index()]
    }
}

impl FeatureVector {
    pub fn set(&mut self, f: Feature, v: f64) {
        self.0[f.index()] = v;
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

/// Selects the active subset of features fed to a model.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FeatureMask([bool; NUM_FEATURES]);

impl Default for FeatureMask {
    /// The nine-feature set used for offline experiments.
    fn default() -> Self {
        use Feature::*;
        Self::from_features(&[
            IsNewFact,
            UserNStudyTotal,
            CardNStudyTotal,
            UsercardNStudyTotal,
            AccUser,
            AccCard,
            AccUsercard,
            UsercardDelta,
            UsercardPrevResponse,
        ])
    }
}

impl FeatureMask {
    pub fn all() -> Self {
        FeatureMask([true; NUM_FEATURES])
    }

    /// No study-data features at all (the study-data ablation).
    pub fn none() -> Self {
        FeatureMask([false; NUM_FEATURES])
    }

    pub fn from_features(features: &[Feature]) -> Self {
        let mut m = [false; NUM_FEATURES];
        for f in features {
            m[f.index()] = true;
        }
        FeatureMask(m)
    }

    /// Parses `default`, `all`, `none`, or a comma-separated list of ids or column names.
    pub fn parse(spec: &str) -> Result<Self, FeatureError> {
        match spec.trim() {
            "default" => Ok(Self::default()),
            "all" => Ok(Self::all()),
            "none" => Ok(Self::none()),
            list => {
                let mut features = Vec::new();
                for part in list.split(',').map(str::trim).filter(|p| !p.is_empty()) {
                    features.push(Feature::from_id(part).ok_or_else(|| FeatureError::UnknownFeature(part.to_owned()))?);
                }
                if features.is_empty() {
                    return Err(FeatureError::UnknownFeature(spec.to_owned()));
                }
                Ok(Self::from_features(&features))
            }
        }
    }

    pub fn is_active(&self, f: Feature) -> bool {
        self.0[f.index()]
    }

    pub fn count(&self) -> usize {
        self.0.iter().filter(|&&b| b).count()
    }

    pub fn active(&self) -> impl Iterator<Item = Feature> + '_ {
        Feature::ALL.iter().copied().filter(|f| self.is_active(*f))
    }

    /// Canonical textual form accepted by [`FeatureMask::parse`].
    pub fn to_spec(&self) -> String {
        if self.count() == 0 {
            return "none".into();
        }
        self.active().map(Feature::id).collect::<Vec<_>>().join(",")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct UserTotals {
    pub positive: u64,
    pub negative: u64,
}

impl UserTotals {
    pub fn add(&mut self, correct: bool) {
        if correct {
            self.positive += 1;
        } else {
            self.negative += 1;
        }
    }

    pub fn total(&self) -> u64 {
        self.positive + self.negative
    }

    pub fn accuracy(&self) -> f64 {
        ratio(self.positive, self.total())
    }
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

#[derive(Debug, Clone, Default)]
struct CardTimeline {
    times: Vec<Timestamp>,
    /// `positives[i]` = correct answers among the first `i` events.
    positives: Vec<u64>,
}

impl CardTimeline {
    fn insert(&mut self, ts: Timestamp, correct: bool) {
        if self.positives.is_empty() {
            self.positives.push(0);
        }
        let pos = self.times.partition_point(|t| *t <= ts);
        self.times.insert(pos, ts);
        let base = self.positives[pos];
        self.positives.insert(pos + 1, base + correct as u64);
        for p in &mut self.positives[pos + 2..] {
            *p += correct as u64;
        }
    }

    fn counts(&self, from: Option<Timestamp>, to: Timestamp) -> UserTotals {
        if self.times.is_empty() {
            return UserTotals::default();
        }
        let end = self.times.partition_point(|t| *t < to);
        let start = from.map_or(0, |f| self.times.partition_point(|t| *t < f)).min(end);
        let positive = self.positives[end] - self.positives[start];
        UserTotals {
            positive,
            negative: (end - start) as u64 - positive,
        }
    }
}

/// Corpus-wide per-card study timeline across all users.
#[derive(Debug, Clone, Default)]
pub struct CardStats {
    cards: HashMap<CardId, CardTimeline>,
    total: usize,
}

impl CardStats {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_records<'a>(records: impl IntoIterator<Item = &'a StudyRecord>) -> Self {
        let mut s = Self::new();
        for r in records {
            s.record(r);
        }
        s
    }

    pub fn record(&mut self, r: &StudyRecord) {
        self.insert(&r.card_id, r.timestamp, r.is_correct());
    }

    pub fn insert(&mut self, card: &CardId, ts: Timestamp, correct: bool) {
        self.cards.entry(card.clone()).or_default().insert(ts, correct);
        self.total += 1;
    }

    /// Counts for `card` over `[from, to)`; `from = None` means since the beginning.
    pub fn counts_between(&self, card: &str, from: Option<Timestamp>, to: Timestamp) -> UserTotals {
        self.cards.get(card).map_or_else(UserTotals::default, |t| t.counts(from, to))
    }

    pub fn counts_before(&self, card: &str, now: Timestamp) -> UserTotals {
        self.counts_between(card, None, now)
    }

    /// Total number of recorded events.
    pub fn len(&self) -> usize {
        self.total
    }

    pub fn is_empty(&self) -> bool {
        self.total == 0
    }
}

/// Per (user, card) state accumulated by replay.
#[derive(Debug, Clone, Default)]
pub struct UserCardState {
    pub totals: UserTotals,
    pub last_ts: Option<Timestamp>,
    /// Hours between the two most recent studies (0 with fewer than two).
    pub prev_gap_hours: f64,
    pub last_correct: bool,
    pub leitner: LeitnerState,
    pub sm2: Sm2State,
    seq: u64,
}

/// Incremental replay of one user's study log.
#[derive(Debug, Clone, Default)]
pub struct UserReplay {
    totals: UserTotals,
    last_ts: Option<Timestamp>,
    session_start: Option<Timestamp>,
    session_totals: UserTotals,
    session_cards: HashMap<CardId, UserTotals>,
    cards: IndexMap<CardId, UserCardState>,
    seq: u64,
}

impl UserReplay {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_records<'a>(records: impl IntoIterator<Item = &'a StudyRecord>) -> Self {
        let mut r = Self::new();
        for rec in records {
            r.apply(rec);
        }
        r
    }

    pub fn apply(&mut self, rec: &StudyRecord) {
        let correct = rec.is_correct();
        let new_session = match self.last_ts {
            None => true,
            Some(last) => rec.timestamp.seconds() - last.seconds() >= SESSION_GAP_SECONDS,
        };
        if new_session {
            self.session_start = Some(rec.timestamp);
            self.session_totals = UserTotals::default();
            self.session_cards.clear();
        }
        self.totals.add(correct);
        self.session_totals.add(correct);
        self.session_cards.entry(rec.card_id.clone()).or_default().add(correct);
        self.last_ts = Some(rec.timestamp);
        self.seq += 1;

        let card = self.cards.entry(rec.card_id.clone()).or_default();
        card.prev_gap_hours = card.last_ts.map_or(0.0, |last| rec.timestamp.hours_since(last));
        card.totals.add(correct);
        card.last_ts = Some(rec.timestamp);
        card.last_correct = correct;
        card.leitner = card.leitner.apply(correct);
        card.sm2 = card.sm2.apply(correct);
        card.seq = self.seq;
    }

    pub fn totals(&self) -> UserTotals {
        self.totals
    }

    pub fn card(&self, card: &str) -> Option<&UserCardState> {
        self.cards.get(card)
    }

    /// Distinct studied cards in first-study order.
    pub fn studied_cards(&self) -> impl Iterator<Item = &CardId> {
        self.cards.keys()
    }

    pub fn num_studied_cards(&self) -> usize {
        self.cards.len()
    }

    /// Up to `k` distinct cards, most recently studied first.
    pub fn recent_cards(&self, k: usize) -> Vec<&CardId> {
        let mut all: Vec<(&CardId, u64)> = self.cards.iter().map(|(id, s)| (id, s.seq)).collect();
        all.sort_unstable_by_key(|&(_, seq)| std::cmp::Reverse(seq));
        all.into_iter().take(k).map(|(id, _)| id).collect()
    }

    fn session_active(&self, now: Timestamp) -> bool {
        self.last_ts.is_some_and(|last| now.seconds() - last.seconds() < SESSION_GAP_SECONDS)
    }

    /// Feature vector for `card` at `now`.
    pub fn features(&self, card: &str, now: Timestamp, ctx: &FeatureContext<'_>) -> FeatureVector {
        use Feature::*;
        let mut v = FeatureVector::default();

        let user = ctx.frozen_user.unwrap_or(self.totals);
        v.set(UserNStudyPositive, user.positive as f64);
        v.set(UserNStudyNegative, user.negative as f64);
        v.set(UserNStudyTotal, user.total() as f64);
        v.set(AccUser, user.accuracy());

        let global = ctx.card_counts(card, None, now);
        v.set(CardNStudyPositive, global.positive as f64);
        v.set(CardNStudyNegative, global.negative as f64);
        v.set(CardNStudyTotal, global.total() as f64);
        v.set(AccCard, global.accuracy());

        let state = self.cards.get(card);
        let uc = state.map(|s| s.totals).unwrap_or_default();
        v.set(IsNewFact, if uc.total() == 0 { 1.0 } else { 0.0 });
        v.set(UsercardNStudyPositive, uc.positive as f64);
        v.set(UsercardNStudyNegative, uc.negative as f64);
        v.set(UsercardNStudyTotal, uc.total() as f64);
        v.set(AccUsercard, uc.accuracy());

        let sm2 = state.map(|s| s.sm2).unwrap_or_default();
        v.set(Sm2Efactor, sm2.efactor);
        v.set(Sm2Interval, sm2.interval);
        v.set(Sm2Repetition, sm2.repetition as f64);

        if let Some(s) = state {
            let last = s.last_ts.expect("studied card has a last timestamp");
            let since_days = now.days_since(last);
            v.set(UsercardDelta, now.hours_since(last));
            v.set(UsercardDeltaPrevious, s.prev_gap_hours);
            v.set(UsercardPrevResponse, if s.last_correct { 1.0 } else { 0.0 });
            v.set(LeitnerBox, s.leitner.box_index as f64);
            v.set(DeltaToLeitner, s.leitner.interval_days() - since_days);
            v.set(DeltaToSm2, s.sm2.interval - since_days);
        }

        if self.session_active(now) {
            v.set(SessionAccUser, self.session_totals.accuracy());
            let since = self.session_start;
            v.set(SessionAccCard, ctx.card_counts(card, since, now).accuracy());
            v.set(SessionAccUsercard, self.session_cards.get(card).map_or(0.0, UserTotals::accuracy));
        }
        v
    }
}

/// Corpus-wide inputs to feature extraction, plus optional overrides.
#[derive(Debug, Clone, Copy)]
pub struct FeatureContext<'a> {
    pub stats: &'a CardStats,
    /// A hypothetical record that is not part of `stats`.
    pub extra: Option<&'a StudyRecord>,
    /// User-level aggregates frozen at a fixed value (test mode).
    pub frozen_user: Option<UserTotals>,
}

impl<'a> FeatureContext<'a> {
    pub fn new(stats: &'a CardStats) -> Self {
        Self {
            stats,
            extra: None,
            frozen_user: None,
        }
    }

    fn card_counts(&self, card: &str, from: Option<Timestamp>, to: Timestamp) -> UserTotals {
        let mut c = self.stats.counts_between(card, from, to);
        if let Some(extra) = self.extra {
            let in_range = extra.timestamp < to && from.is_none_or(|f| extra.timestamp >= f);
            if extra.card_id.as_str() == card && in_range {
                c.add(extra.is_correct());
            }
        }
        c
    }
}

/// Features of `card` for the owner of `history` at `now`.
pub fn extract(history: &StudyHistory, card: &str, now: Timestamp, stats: &CardStats) -> FeatureVector {
    UserReplay::from_records(history.before(now)).features(card, now, &FeatureContext::new(stats))
}

/// `(leitner_box, delta_to_leitner)` for `card` at `now`.
pub fn leitner_state(history: &StudyHistory, card: &str, now: Timestamp) -> (u32, f64) {
    let mut last = None;
    let state = LeitnerState::fold(history.before(now).iter().filter(|r| r.card_id.as_str() == card).map(|r| {
        last = Some(r.timestamp);
        r.is_correct()
    }));
    let delta = last.map_or(0.0, |l| state.interval_days() - now.days_since(l));
    (state.box_index, delta)
}

/// `(state, delta_to_sm2)` for `card` at `now`.
pub fn sm2_state(history: &StudyHistory, card: &str, now: Timestamp) -> (Sm2State, f64) {
    let mut last = None;
    let state = Sm2State::fold(history.before(now).iter().filter(|r| r.card_id.as_str() == card).map(|r| {
        last = Some(r.timestamp);
        r.is_correct()
    }));
    let delta = last.map_or(0.0, |l| state.interval - now.days_since(l));
    (state, delta)
}
