//! Service state: per-user histories and test sessions, global card
//! statistics, and the durable event log they are rebuilt from.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, RwLock};

use recall_core::baselines::FsrsModel;
use recall_core::eval::{forgetting_curve, ForgettingCurve};
use recall_core::features::{CardStats, UserTotals, SESSION_GAP_SECONDS};
use recall_core::ingestion::DatasetRow;
use recall_core::model::{StudentModel, StudentView};
use recall_core::policy::{schedule_delta, schedule_threshold, PolicyConfig, PolicyKind};
use recall_core::testmode::{Phase, TestArm, TestSession, ThroughputReport, DAILY_CARDS, TEST_SET_SIZE};
use recall_core::{CardId, Corpus, Label, StudyHistory, StudyRecord, Timestamp, UserId};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::ServiceError;
use crate::events::{ControlEvent, Event, EventLog, StudyEvent};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EngineOptions {
    pub fsync: bool,
    pub snapshot_every: usize,
    pub delta_interval_seconds: i64,
    pub retention_threshold: f64,
    pub default_n: usize,
}

impl Default for EngineOptions {
    fn default() -> Self {
        Self {
            fsync: true,
            snapshot_every: 1000,
            delta_interval_seconds: recall_core::domain::SECONDS_PER_DAY,
            retention_threshold: 0.9,
            default_n: 10,
        }
    }
}

#[derive(Debug, Clone)]
struct UserState {
    history: StudyHistory,
    created_at: Timestamp,
    session: Option<TestSession>,
    /// User-level aggregates frozen while a test session runs.
    frozen: Option<UserTotals>,
    acks: HashMap<String, RecordAck>,
}

impl UserState {
    fn active_session(&self) -> Option<&TestSession> {
        self.session.as_ref().filter(|s| s.phase != Phase::Done)
    }

    fn frozen_totals(&self) -> Option<UserTotals> {
        self.active_session().and(self.frozen)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordAck {
    pub user_id: UserId,
    pub card_id: CardId,
    pub timestamp: Timestamp,
    pub history_len: usize,
    /// 1-based position of the event in the log.
    pub event_index: usize,
    /// False when the idempotency key was already applied.
    pub applied: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RecordRequest {
    pub user_id: UserId,
    pub card_id: CardId,
    pub correct: bool,
    pub elapsed_ms: u64,
    pub timestamp: Option<Timestamp>,
    pub idempotency_key: Option<String>,
    pub answer_text: Option<String>,
}

impl RecordRequest {
    pub fn new(user_id: impl Into<UserId>, card_id: impl Into<CardId>, correct: bool) -> Self {
        Self {
            user_id: user_id.into(),
            card_id: card_id.into(),
            correct,
            elapsed_ms: 0,
            timestamp: None,
            idempotency_key: None,
            answer_text: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub user_id: UserId,
    pub card_id: CardId,
    pub probability: f64,
    pub model: String,
    pub seen: bool,
    pub at: Timestamp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeltaComponents {
    pub score: f64,
    pub p_now: f64,
    pub p_later_correct: f64,
    pub p_later_incorrect: f64,
    pub p_later_no_study: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleEntry {
    pub card_id: CardId,
    pub probability: f64,
    pub priority: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub delta: Option<DeltaComponents>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub user_id: UserId,
    pub policy: PolicyKind,
    pub model: String,
    pub at: Timestamp,
    pub cards: Vec<ScheduleEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserStats {
    pub user_id: UserId,
    pub n_study_total: u64,
    pub n_study_positive: u64,
    pub n_study_negative: u64,
    pub accuracy: f64,
    pub distinct_cards: usize,
    pub last_study: Option<Timestamp>,
    pub test_phase: Option<Phase>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestStatus {
    pub user_id: UserId,
    pub arm: TestArm,
    pub phase: Phase,
    pub day: u32,
    pub cards: Vec<CardId>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestNext {
    pub user_id: UserId,
    pub phase: Phase,
    pub day: u32,
    pub card_id: Option<CardId>,
    pub front_text: Option<String>,
    pub remaining: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub events: usize,
    pub users: usize,
    pub records: usize,
    pub digest: String,
}

/// How the snapshot on disk compared with the replayed log at boot.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SnapshotCheck {
    Missing,
    Matched,
    /// The snapshot covers a different number of events than the log.
    Stale {
        snapshot_events: usize,
        log_events: usize,
    },
    Mismatch,
}

pub struct Engine {
    corpus: Corpus,
    card_order: Vec<CardId>,
    model: Arc<dyn StudentModel>,
    options: EngineOptions,
    /// Writers hold it shared; snapshots hold it exclusively.
    gate: RwLock<()>,
    users: RwLock<HashMap<UserId, Arc<Mutex<UserState>>>>,
    stats: RwLock<CardStats>,
    log: Mutex<EventLog>,
    snapshot_path: PathBuf,
    boot_check: SnapshotCheck,
}

fn snapshot_path(log: &Path) -> PathBuf {
    let mut name = log.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".snapshot.json");
    log.with_file_name(name)
}

fn lock<T>(m: &Mutex<T>) -> std::sync::MutexGuard<'_, T> {
    m.lock().unwrap_or_else(|p| p.into_inner())
}

fn read<T>(m: &RwLock<T>) -> std::sync::RwLockReadGuard<'_, T> {
    m.read().unwrap_or_else(|p| p.into_inner())
}

fn write<T>(m: &RwLock<T>) -> std::sync::RwLockWriteGuard<'_, T> {
    m.write().unwrap_or_else(|p| p.into_inner())
}

/// Cards the user studied in the session still running at `now`.
fn session_cards(history: &StudyHistory, now: Timestamp) -> HashSet<&CardId> {
    let mut cards = HashSet::new();
    let mut last = now;
    for r in history.before(now).iter().rev() {
        if last.seconds() - r.timestamp.seconds() >= SESSION_GAP_SECONDS {
            break;
        }
        cards.insert(&r.card_id);
        last = r.timestamp;
    }
    cards
}

impl Engine {
    /// Opens the log at `log_path` and rebuilds state by replaying it.
    pub fn open(corpus: Corpus, model: Arc<dyn StudentModel>, log_path: impl AsRef<Path>, options: EngineOptions) -> Result<Self, ServiceError> {
        let log_path = log_path.as_ref();
        let (log, events) = EventLog::open(log_path, options.fsync)?;
        let mut card_order: Vec<CardId> = corpus.iter().map(|c| c.card_id.clone()).collect();
        card_order.sort();
        let mut engine = Self {
            corpus,
            card_order,
            model,
            options,
            gate: RwLock::new(()),
            users: RwLock::new(HashMap::new()),
            stats: RwLock::new(CardStats::new()),
            log: Mutex::new(log),
            snapshot_path: snapshot_path(log_path),
            boot_check: SnapshotCheck::Missing,
        };
        for (i, e) in events.iter().enumerate() {
            engine.replay(e, i + 1).map_err(|err| ServiceError::Startup {
                path: log_path.display().to_string(),
                reason: format!("event {}: {err}", i + 1),
            })?;
        }
        engine.boot_check = engine.check_snapshot(events.len());
        if !matches!(engine.boot_check, SnapshotCheck::Matched | SnapshotCheck::Missing) {
            log::warn!("snapshot check at boot: {:?}", engine.boot_check);
        }
        log::info!("replayed {} events for {} users", events.len(), read(&engine.users).len());
        Ok(engine)
    }

    pub fn boot_check(&self) -> &SnapshotCheck {
        &self.boot_check
    }

    pub fn corpus(&self) -> &Corpus {
        &self.corpus
    }

    pub fn model_tag(&self) -> &str {
        self.model.tag()
    }

    pub fn event_count(&self) -> usize {
        lock(&self.log).len()
    }

    fn user(&self, user: &str) -> Result<Arc<Mutex<UserState>>, ServiceError> {
        read(&self.users).get(user).cloned().ok_or_else(|| ServiceError::UnknownUser(user.to_owned()))
    }

    fn require_card(&self, card: &str) -> Result<(), ServiceError> {
        if self.corpus.contains(card) {
            Ok(())
        } else {
            Err(ServiceError::UnknownCard(card.to_owned()))
        }
    }

    fn append(&self, event: &Event) -> Result<usize, ServiceError> {
        Ok(lock(&self.log).append(event)?)
    }

    fn after_write(&self, event_index: usize) {
        if self.options.snapshot_every > 0 && event_index % self.options.snapshot_every == 0 {
            if let Err(e) = self.write_snapshot() {
                log::warn!("snapshot failed: {e}");
            }
        }
    }

    fn study_row(req: &RecordRequest, ts: Timestamp, deck_id: &str) -> DatasetRow {
        let mut row = DatasetRow::new(req.user_id.clone(), req.card_id.clone(), ts, req.correct);
        row.elapsed_milliseconds = Some(req.elapsed_ms as f64);
        row.deck_id = deck_id.to_owned();
        row
    }

    // Mutations. Each validates, appends to the log, then applies.

    fn apply_study(&self, state: &mut UserState, ev: &StudyEvent, event_index: usize) -> Result<RecordAck, ServiceError> {
        let record = ev.row.to_record();
        state.history.check_append(&record)?;
        let session = if ev.test {
            let mut s = state.session.clone().ok_or_else(|| ServiceError::NoSession(record.user_id.to_string()))?;
            s.submit(record.card_id.as_str(), record.is_correct(), record.elapsed_ms, record.timestamp)?;
            Some(s)
        } else {
            None
        };
        write(&self.stats).record(&record);
        state.history.push(record.clone())?;
        if session.is_some() {
            state.session = session;
        }
        let ack = RecordAck {
            user_id: record.user_id,
            card_id: record.card_id,
            timestamp: record.timestamp,
            history_len: state.history.len(),
            event_index,
            applied: true,
        };
        if let Some(k) = &ev.idempotency_key {
            state.acks.insert(k.clone(), ack.clone());
        }
        Ok(ack)
    }

    fn apply_control(&self, state: &mut UserState, ev: &ControlEvent) -> Result<(), ServiceError> {
        match ev {
            ControlEvent::User { .. } => Ok(()),
            ControlEvent::TestStart { user_id, cards, at } => {
                if state.active_session().is_some() {
                    return Err(ServiceError::PhaseViolation("a test session is already running".into()));
                }
                state.session = Some(TestSession::start(user_id.clone(), cards.clone(), *at)?);
                state.frozen = Some(UserTotals {
                    positive: state.history.records().iter().filter(|r| r.is_correct()).count() as u64,
                    negative: state.history.records().iter().filter(|r| !r.is_correct()).count() as u64,
                });
                Ok(())
            }
            ControlEvent::TestSelect { user_id, cards, at } => {
                let s = state.session.as_mut().ok_or_else(|| ServiceError::NoSession(user_id.to_string()))?;
                let mut next = s.clone();
                next.select_daily(cards.clone(), *at)?;
                *s = next;
                Ok(())
            }
        }
    }

    fn replay(&mut self, event: &Event, index: usize) -> Result<(), ServiceError> {
        match event {
            Event::Control(ControlEvent::User { user_id, at }) => {
                self.insert_user(user_id, *at);
                Ok(())
            }
            Event::Control(c) => {
                let user = match c {
                    ControlEvent::TestStart { user_id, .. } | ControlEvent::TestSelect { user_id, .. } => user_id,
                    ControlEvent::User { .. } => unreachable!(),
                };
                let state = self.user(user.as_str())?;
                let mut state = lock(&state);
                self.apply_control(&mut state, c)
            }
            Event::Study(s) => {
                let state = self.user(s.row.user_id.as_str())?;
                let mut state = lock(&state);
                self.apply_study(&mut state, s, index).map(|_| ())
            }
        }
    }

    fn insert_user(&self, user: &UserId, at: Timestamp) -> bool {
        let mut users = write(&self.users);
        if users.contains_key(user) {
            return false;
        }
        users.insert(
            user.clone(),
            Arc::new(Mutex::new(UserState {
                history: StudyHistory::new(user.clone()),
                created_at: at,
                session: None,
                frozen: None,
                acks: HashMap::new(),
            })),
        );
        true
    }

    /// Creates `user`; returns false if it already existed.
    pub fn create_user(&self, user: &str, now: Timestamp) -> Result<bool, ServiceError> {
        if user.trim().is_empty() {
            return Err(ServiceError::InvalidRequest("user_id must be nonempty".into()));
        }
        let _gate = read(&self.gate);
        let id = UserId::new(user);
        if read(&self.users).contains_key(&id) {
            return Ok(false);
        }
        // Hold the map lock across log-then-insert so concurrent creators agree.
        let mut users = write(&self.users);
        if users.contains_key(&id) {
            return Ok(false);
        }
        let index = self.append(&Event::Control(ControlEvent::User { user_id: id.clone(), at: now }))?;
        users.insert(
            id.clone(),
            Arc::new(Mutex::new(UserState {
                history: StudyHistory::new(id),
                created_at: now,
                session: None,
                frozen: None,
                acks: HashMap::new(),
            })),
        );
        drop(users);
        drop(_gate);
        self.after_write(index);
        Ok(true)
    }

    /// Appends a study to the log and applies it. A repeated idempotency key
    /// returns the original acknowledgment without applying anything.
    pub fn record(&self, req: &RecordRequest, now: Timestamp) -> Result<RecordAck, ServiceError> {
        let gate = read(&self.gate);
        let state = self.user(req.user_id.as_str())?;
        let mut state = lock(&state);
        if let Some(ack) = req.idempotency_key.as_ref().and_then(|k| state.acks.get(k)) {
            return Ok(RecordAck { applied: false, ..ack.clone() });
        }
        let card = self
            .corpus
            .get(req.card_id.as_str())
            .ok_or_else(|| ServiceError::UnknownCard(req.card_id.to_string()))?;
        let ts = req.timestamp.unwrap_or(now);
        let event = StudyEvent {
            row: Self::study_row(req, ts, &card.deck_id),
            idempotency_key: req.idempotency_key.clone(),
            answer_text: req.answer_text.clone(),
            test: false,
        };
        state.history.check_append(&event.row.to_record())?;
        let index = self.append(&Event::Study(Box::new(event.clone())))?;
        let ack = self.apply_study(&mut state, &event, index)?;
        drop(state);
        drop(gate);
        self.after_write(index);
        Ok(ack)
    }

    fn view<'a>(&self, state: &'a UserState, stats: &'a CardStats) -> StudentView<'a> {
        StudentView::new(&state.history, stats).with_frozen_user(state.frozen_totals())
    }

    pub fn predict(&self, user: &str, card: &str, now: Timestamp) -> Result<Prediction, ServiceError> {
        self.require_card(card)?;
        let state = self.user(user)?;
        let state = lock(&state);
        let stats = read(&self.stats);
        let view = self.view(&state, &stats);
        let p = self.model.predict(&view, card, now)?;
        Ok(Prediction {
            user_id: UserId::new(user),
            card_id: CardId::new(card),
            probability: p.probability,
            model: p.model_tag,
            seen: view.seen(card, now),
            at: now,
        })
    }

    pub fn curve(&self, user: &str, card: &str, now: Timestamp) -> Result<ForgettingCurve, ServiceError> {
        self.require_card(card)?;
        let state = self.user(user)?;
        let state = lock(&state);
        let stats = read(&self.stats);
        Ok(forgetting_curve(self.model.as_ref(), &self.view(&state, &stats), card, now)?)
    }

    fn policy(&self, kind: PolicyKind, n: usize) -> PolicyConfig {
        PolicyConfig {
            kind,
            delta_interval_seconds: self.options.delta_interval_seconds,
            n_cards: n,
            retention_threshold: self.options.retention_threshold,
        }
    }

    /// Cards of `deck` (all cards when `None`) not yet shown in the running
    /// session, ranked by `kind`.
    pub fn schedule(&self, user: &str, deck: Option<&str>, n: Option<usize>, kind: PolicyKind, now: Timestamp) -> Result<Schedule, ServiceError> {
        let state = self.user(user)?;
        let state = lock(&state);
        let shown = session_cards(&state.history, now);
        let candidates: Vec<CardId> = self
            .card_order
            .iter()
            .filter(|c| deck.is_none_or(|d| self.corpus.get(c.as_str()).is_some_and(|card| card.deck_id == d)))
            .filter(|c| !shown.contains(c))
            .cloned()
            .collect();
        let config = self.policy(kind, n.unwrap_or(self.options.default_n));
        config.validate()?;
        let stats = read(&self.stats);
        let view = self.view(&state, &stats);
        let cards = match kind {
            PolicyKind::Delta => schedule_delta(self.model.as_ref(), &view, &candidates, now, &config)?
                .into_iter()
                .map(|d| ScheduleEntry {
                    card_id: d.card_id,
                    probability: d.p_now,
                    priority: d.score,
                    delta: Some(DeltaComponents {
                        score: d.score,
                        p_now: d.p_now,
                        p_later_correct: d.p_later_correct,
                        p_later_incorrect: d.p_later_incorrect,
                        p_later_no_study: d.p_later_no_study,
                    }),
                })
                .collect(),
            PolicyKind::Threshold => schedule_threshold(self.model.as_ref(), &view, &candidates, now, &config)?
                .into_iter()
                .map(|s| ScheduleEntry {
                    card_id: s.card_id,
                    probability: s.probability,
                    priority: s.priority,
                    delta: None,
                })
                .collect(),
        };
        Ok(Schedule {
            user_id: UserId::new(user),
            policy: kind,
            model: self.model.tag().to_owned(),
            at: now,
            cards,
        })
    }

    pub fn stats(&self, user: &str) -> Result<UserStats, ServiceError> {
        let state = self.user(user)?;
        let state = lock(&state);
        let records = state.history.records();
        let positive = records.iter().filter(|r| r.is_correct()).count() as u64;
        let total = records.len() as u64;
        Ok(UserStats {
            user_id: UserId::new(user),
            n_study_total: total,
            n_study_positive: positive,
            n_study_negative: total - positive,
            accuracy: if total == 0 { 0.0 } else { positive as f64 / total as f64 },
            distinct_cards: records.iter().map(|r| &r.card_id).collect::<HashSet<_>>().len(),
            last_study: state.history.last_timestamp(),
            test_phase: state.session.as_ref().map(|s| s.phase),
        })
    }

    fn status(session: &TestSession, now: Timestamp) -> TestStatus {
        TestStatus {
            user_id: session.user_id.clone(),
            arm: session.arm,
            phase: session.phase,
            day: session.day(now),
            cards: session.cards.clone(),
        }
    }

    /// Starts a test session. Without explicit cards, the first 20 cards by id
    /// the user has never studied form the test set.
    pub fn test_start(&self, user: &str, cards: Option<Vec<CardId>>, now: Timestamp) -> Result<TestStatus, ServiceError> {
        let gate = read(&self.gate);
        let state = self.user(user)?;
        let mut state = lock(&state);
        let cards = match cards {
            Some(c) => c,
            None => self
                .card_order
                .iter()
                .filter(|c| !state.history.seen(c.as_str()))
                .take(TEST_SET_SIZE)
                .cloned()
                .collect(),
        };
        for c in &cards {
            self.require_card(c.as_str())?;
        }
        let event = ControlEvent::TestStart {
            user_id: UserId::new(user),
            cards,
            at: now,
        };
        let mut probe = state.clone();
        self.apply_control(&mut probe, &event)?;
        let index = self.append(&Event::Control(event.clone()))?;
        self.apply_control(&mut state, &event)?;
        let status = Self::status(state.session.as_ref().expect("session just started"), now);
        drop(state);
        drop(gate);
        self.after_write(index);
        Ok(status)
    }

    /// Daily selection for the session's arm: lowest retrievability first
    /// for FSRS, highest delta score for the content-aware arm.
    fn select_daily(&self, state: &UserState, session: &TestSession, now: Timestamp) -> Result<Vec<CardId>, ServiceError> {
        let stats = read(&self.stats);
        let view = self.view(state, &stats);
        match session.arm {
            TestArm::Fsrs => {
                let mut scored = session
                    .cards
                    .iter()
                    .map(|c| Ok((FsrsModel.predict(&view, c.as_str(), now)?.probability, c.clone())))
                    .collect::<Result<Vec<_>, ServiceError>>()?;
                scored.sort_by(|a, b| a.0.total_cmp(&b.0).then_with(|| a.1.cmp(&b.1)));
                Ok(scored.into_iter().take(DAILY_CARDS).map(|(_, c)| c).collect())
            }
            TestArm::Delta => {
                let config = self.policy(PolicyKind::Delta, DAILY_CARDS);
                Ok(schedule_delta(self.model.as_ref(), &view, &session.cards, now, &config)?
                    .into_iter()
                    .map(|d| d.card_id)
                    .collect())
            }
        }
    }

    /// Next test-mode card. Makes (and logs) the daily selection when due.
    pub fn test_next(&self, user: &str, now: Timestamp) -> Result<TestNext, ServiceError> {
        let gate = read(&self.gate);
        let state = self.user(user)?;
        let mut state = lock(&state);
        let session = state.session.clone().ok_or_else(|| ServiceError::NoSession(user.to_owned()))?;
        let mut written = None;
        if session.needs_selection() {
            let cards = self.select_daily(&state, &session, now)?;
            let event = ControlEvent::TestSelect {
                user_id: UserId::new(user),
                cards,
                at: now,
            };
            let mut probe = state.clone();
            self.apply_control(&mut probe, &event)?;
            let index = self.append(&Event::Control(event.clone()))?;
            self.apply_control(&mut state, &event)?;
            written = Some(index);
        }
        let session = state.session.as_ref().expect("checked above");
        let card = session.next_card(now)?.cloned();
        let next = TestNext {
            user_id: UserId::new(user),
            phase: session.phase,
            day: session.day(now),
            front_text: card.as_ref().and_then(|c| self.corpus.get(c.as_str())).map(|c| c.front_text.clone()),
            card_id: card,
            remaining: session.pending().len(),
        };
        drop(state);
        drop(gate);
        if let Some(i) = written {
            self.after_write(i);
        }
        Ok(next)
    }

    /// Records a test-mode answer; it also counts as a study.
    pub fn test_submit(&self, req: &RecordRequest, now: Timestamp) -> Result<TestStatus, ServiceError> {
        let gate = read(&self.gate);
        let state = self.user(req.user_id.as_str())?;
        let mut state = lock(&state);
        if let Some(k) = &req.idempotency_key {
            if state.acks.contains_key(k) {
                let s = state.session.as_ref().ok_or_else(|| ServiceError::NoSession(req.user_id.to_string()))?;
                return Ok(Self::status(s, now));
            }
        }
        let card = self
            .corpus
            .get(req.card_id.as_str())
            .ok_or_else(|| ServiceError::UnknownCard(req.card_id.to_string()))?;
        let ts = req.timestamp.unwrap_or(now);
        let event = StudyEvent {
            row: Self::study_row(req, ts, &card.deck_id),
            idempotency_key: req.idempotency_key.clone(),
            answer_text: req.answer_text.clone(),
            test: true,
        };
        let record = event.row.to_record();
        state.history.check_append(&record)?;
        let mut probe = state.session.clone().ok_or_else(|| ServiceError::NoSession(req.user_id.to_string()))?;
        probe.submit(record.card_id.as_str(), record.is_correct(), record.elapsed_ms, record.timestamp)?;
        let index = self.append(&Event::Study(Box::new(event.clone())))?;
        self.apply_study(&mut state, &event, index)?;
        let status = Self::status(state.session.as_ref().expect("probed"), now);
        drop(state);
        drop(gate);
        self.after_write(index);
        Ok(status)
    }

    pub fn test_report(&self, user: &str) -> Result<ThroughputReport, ServiceError> {
        let state = self.user(user)?;
        let state = lock(&state);
        let session = state.session.as_ref().ok_or_else(|| ServiceError::NoSession(user.to_owned()))?;
        Ok(session.report()?)
    }

    /// Number of studies recorded for `user`.
    pub fn history_len(&self, user: &str) -> Result<usize, ServiceError> {
        let state = self.user(user)?;
        let len = lock(&state).history.len();
        Ok(len)
    }

    pub fn history(&self, user: &str) -> Result<Vec<StudyRecord>, ServiceError> {
        let state = self.user(user)?;
        let records = lock(&state).history.records().to_vec();
        Ok(records)
    }

    /// SHA-256 over every user's history, session, and acknowledged keys, in
    /// user-id order, plus the global event count of each card.
    pub fn digest(&self) -> String {
        let users = read(&self.users);
        let ordered: BTreeMap<&UserId, &Arc<Mutex<UserState>>> = users.iter().collect();
        let mut h = Sha256::new();
        let mut cards: BTreeMap<CardId, u64> = BTreeMap::new();
        for (id, state) in ordered {
            let s = lock(state);
            h.update(id.as_str().as_bytes());
            h.update(s.created_at.seconds().to_le_bytes());
            for r in s.history.records() {
                h.update(serde_json::to_vec(r).expect("records serialize"));
                *cards.entry(r.card_id.clone()).or_default() += 1;
            }
            h.update(serde_json::to_vec(&s.session).expect("sessions serialize"));
            h.update(serde_json::to_vec(&s.frozen).expect("totals serialize"));
            let acks: BTreeMap<_, _> = s.acks.iter().collect();
            h.update(serde_json::to_vec(&acks).expect("acks serialize"));
        }
        let stats = read(&self.stats);
        h.update(stats.len().to_le_bytes());
        for (card, n) in cards {
            h.update(card.as_str().as_bytes());
            h.update(n.to_le_bytes());
            h.update(stats.counts_before(card.as_str(), Timestamp(i64::MAX)).total().to_le_bytes());
        }
        hex::encode(h.finalize())
    }

    pub fn snapshot(&self) -> Snapshot {
        let _gate = write(&self.gate);
        self.snapshot_locked()
    }

    fn snapshot_locked(&self) -> Snapshot {
        let users = read(&self.users);
        let records = users.values().map(|s| lock(s).history.len()).sum();
        let n_users = users.len();
        drop(users);
        Snapshot {
            events: self.event_count(),
            users: n_users,
            records,
            digest: self.digest(),
        }
    }

    /// Writes the snapshot next to the log, atomically via rename.
    pub fn write_snapshot(&self) -> Result<Snapshot, ServiceError> {
        let snap = self.snapshot();
        let tmp = self.snapshot_path.with_extension("tmp");
        std::fs::write(&tmp, serde_json::to_vec_pretty(&snap).map_err(std::io::Error::other)?)?;
        std::fs::rename(&tmp, &self.snapshot_path)?;
        Ok(snap)
    }

    fn check_snapshot(&self, log_events: usize) -> SnapshotCheck {
        let Ok(bytes) = std::fs::read(&self.snapshot_path) else {
            return SnapshotCheck::Missing;
        };
        let Ok(snap) = serde_json::from_slice::<Snapshot>(&bytes) else {
            return SnapshotCheck::Mismatch;
        };
        if snap.events != log_events {
            return SnapshotCheck::Stale {
                snapshot_events: snap.events,
                log_events,
            };
        }
        if snap == self.snapshot_locked() {
            SnapshotCheck::Matched
        } else {
            SnapshotCheck::Mismatch
        }
    }
}

/// Parses a client response value: booleans, 0/1, or their string forms.
pub fn parse_response(v: &serde_json::Value) -> Result<bool, ServiceError> {
    let bad = || ServiceError::InvalidRequest(format!("response must be 0 or 1, got {v}"));
    match v {
        serde_json::Value::Bool(b) => Ok(*b),
        serde_json::Value::Number(n) => n.as_i64().and_then(Label::from_int).map(Label::is_correct).ok_or_else(bad),
        serde_json::Value::String(s) => match s.as_str() {
            "1" | "true" | "correct" => Ok(true),
            "0" | "false" | "incorrect" => Ok(false),
            _ => Err(bad()),
        },
        _ => Err(bad()),
    }
}
