//! Six-day test-mode protocol: a 20-card pretest, five daily reviews of ten
//! cards, a posttest of all 20 on day six or later, and the throughput report.

use std::collections::HashSet;
use std::fmt;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::domain::{CardId, Timestamp, UserId, SECONDS_PER_DAY};

pub const TEST_SET_SIZE: usize = 20;
pub const DAILY_CARDS: usize = 10;
pub const DAILY_DAYS: u32 = 5;
pub const POSTTEST_DAY: u32 = DAILY_DAYS + 1;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TestModeError {
    #[error("test set must hold {TEST_SET_SIZE} distinct cards, got {0}")]
    InvalidTestSet(usize),
    #[error("phase violation: {0}")]
    PhaseViolation(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "phase", content = "day", rename_all = "snake_case")]
pub enum Phase {
    Pretest,
    Daily(u32),
    Posttest,
    Done,
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Phase::Pretest => f.write_str("pretest"),
            Phase::Daily(d) => write!(f, "daily-{d}"),
            Phase::Posttest => f.write_str("posttest"),
            Phase::Done => f.write_str("done"),
        }
    }
}

/// Scheduler that drives the daily reviews of a session.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TestArm {
    Fsrs,
    Delta,
}

impl TestArm {
    /// Deterministic within-subject assignment from the parity of SHA-256(user id).
    pub fn assign(user: &str) -> Self {
        let digest = Sha256::digest(user.as_bytes());
        if digest[digest.len() - 1] % 2 == 0 {
            TestArm::Fsrs
        } else {
            TestArm::Delta
        }
    }

    pub fn tag(self) -> &'static str {
        match self {
            TestArm::Fsrs => "fsrs-simplified",
            TestArm::Delta => "delta",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Answer {
    pub card_id: CardId,
    pub correct: bool,
    pub elapsed_ms: u64,
    pub at: Timestamp,
}

/// Post-test throughput. Response times are in seconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThroughputReport {
    pub pretest_accuracy: f64,
    pub posttest_accuracy: f64,
    pub mean_response_correct: Option<f64>,
    pub mean_response_all: f64,
    pub ttp: f64,
}

/// Correct answers per second: `TEST_SET_SIZE * accuracy / mean response time`.
pub fn testing_throughput(posttest_accuracy: f64, mean_response_seconds: f64) -> f64 {
    TEST_SET_SIZE as f64 * posttest_accuracy / mean_response_seconds
}

impl ThroughputReport {
    pub fn from_answers(pretest: &[Answer], posttest: &[Answer]) -> Self {
        let acc = |a: &[Answer]| a.iter().filter(|x| x.correct).count() as f64 / a.len().max(1) as f64;
        let secs = |a: &Answer| a.elapsed_ms as f64 / 1000.0;
        let mean = |xs: Vec<f64>| (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64);
        let posttest_accuracy = acc(posttest);
        let mean_response_all = mean(posttest.iter().map(secs).collect()).unwrap_or(0.0);
        Self {
            pretest_accuracy: acc(pretest),
            posttest_accuracy,
            mean_response_correct: mean(posttest.iter().filter(|a| a.correct).map(secs).collect()),
            mean_response_all,
            ttp: testing_throughput(posttest_accuracy, mean_response_all),
        }
    }
}

/// One user's test-mode session.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestSession {
    pub user_id: UserId,
    pub cards: Vec<CardId>,
    pub arm: TestArm,
    pub start: Timestamp,
    pub phase: Phase,
    pub pretest: Vec<Answer>,
    /// Answers of each completed or running daily review.
    pub daily: Vec<Vec<Answer>>,
    /// Cards chosen for the running daily review.
    pub daily_selection: Vec<CardId>,
    pub posttest: Vec<Answer>,
}

impl TestSession {
    pub fn start(user_id: impl Into<UserId>, cards: Vec<CardId>, start: Timestamp) -> Result<Self, TestModeError> {
        let user_id = user_id.into();
        let distinct: HashSet<&CardId> = cards.iter().collect();
        if cards.len() != TEST_SET_SIZE || distinct.len() != TEST_SET_SIZE {
            return Err(TestModeError::InvalidTestSet(distinct.len()));
        }
        Ok(Self {
            arm: TestArm::assign(user_id.as_str()),
            user_id,
            cards,
            start,
            phase: Phase::Pretest,
            pretest: Vec::new(),
            daily: Vec::new(),
            daily_selection: Vec::new(),
            posttest: Vec::new(),
        })
    }

    /// Protocol day of `now`: 1 on the start day.
    pub fn day(&self, now: Timestamp) -> u32 {
        ((now.seconds() - self.start.seconds()).max(0) / SECONDS_PER_DAY) as u32 + 1
    }

    fn violation<T>(msg: String) -> Result<T, TestModeError> {
        Err(TestModeError::PhaseViolation(msg))
    }

    fn open(&self, now: Timestamp) -> Result<(), TestModeError> {
        let day = self.day(now);
        match self.phase {
            Phase::Daily(d) if day < d => Self::violation(format!("daily review {d} opens on day {d}, now day {day}")),
            Phase::Posttest if day < POSTTEST_DAY => Self::violation(format!("posttest opens on day {POSTTEST_DAY}, now day {day}")),
            Phase::Done => Self::violation("session is complete".into()),
            _ => Ok(()),
        }
    }

    /// Whether the running daily review still needs its card selection.
    pub fn needs_selection(&self) -> bool {
        matches!(self.phase, Phase::Daily(_)) && self.daily_selection.is_empty()
    }

    /// Cards of the current phase not yet answered, in presentation order.
    pub fn pending(&self) -> Vec<&CardId> {
        let answered = |answers: &[Answer]| answers.iter().map(|a| a.card_id.clone()).collect::<HashSet<_>>();
        match self.phase {
            Phase::Pretest => {
                let done = answered(&self.pretest);
                self.cards.iter().filter(|c| !done.contains(*c)).collect()
            }
            Phase::Daily(_) => {
                let done = answered(self.daily.last().map_or(&[], Vec::as_slice));
                self.daily_selection.iter().filter(|c| !done.contains(*c)).collect()
            }
            Phase::Posttest => {
                let done = answered(&self.posttest);
                self.cards.iter().filter(|c| !done.contains(*c)).collect()
            }
            Phase::Done => Vec::new(),
        }
    }

    /// Next card to show at `now`, or a violation if the phase is not open yet.
    pub fn next_card(&self, now: Timestamp) -> Result<Option<&CardId>, TestModeError> {
        self.open(now)?;
        if self.needs_selection() {
            return Self::violation("daily selection has not been made".into());
        }
        Ok(self.pending().into_iter().next())
    }

    /// Fixes the ten cards of the running daily review.
    pub fn select_daily(&mut self, cards: Vec<CardId>, now: Timestamp) -> Result<(), TestModeError> {
        self.open(now)?;
        if !self.needs_selection() {
            return Self::violation(format!("no daily selection expected in {}", self.phase));
        }
        let distinct: HashSet<&CardId> = cards.iter().collect();
        if cards.len() != DAILY_CARDS || distinct.len() != DAILY_CARDS || !cards.iter().all(|c| self.cards.contains(c)) {
            return Self::violation(format!("daily selection must be {DAILY_CARDS} distinct test-set cards"));
        }
        self.daily_selection = cards;
        self.daily.push(Vec::new());
        Ok(())
    }

    /// Records an answer to a pending card and advances the phase when it completes.
    pub fn submit(&mut self, card: &str, correct: bool, elapsed_ms: u64, now: Timestamp) -> Result<Phase, TestModeError> {
        self.open(now)?;
        if self.needs_selection() {
            return Self::violation("daily selection has not been made".into());
        }
        if !self.pending().iter().any(|c| c.as_str() == card) {
            return Self::violation(format!("card {card} is not pending in {}", self.phase));
        }
        let answer = Answer {
            card_id: CardId::new(card),
            correct,
            elapsed_ms,
            at: now,
        };
        match self.phase {
            Phase::Pretest => self.pretest.push(answer),
            Phase::Daily(_) => self.daily.last_mut().expect("selection pushed a day").push(answer),
            Phase::Posttest => self.posttest.push(answer),
            Phase::Done => unreachable!("open rejects done"),
        }
        if self.pending().is_empty() {
            self.phase = match self.phase {
                Phase::Pretest => Phase::Daily(1),
                Phase::Daily(d) if d < DAILY_DAYS => Phase::Daily(d + 1),
                Phase::Daily(_) => Phase::Posttest,
                _ => Phase::Done,
            };
            self.daily_selection.clear();
        }
        Ok(self.phase)
    }

    pub fn report(&self) -> Result<ThroughputReport, TestModeError> {
        if self.phase != Phase::Done {
            return Self::violation(format!("report requested during {}", self.phase));
        }
        Ok(ThroughputReport::from_answers(&self.pretest, &self.posttest))
    }
}
