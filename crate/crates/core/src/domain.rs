//! Core data model: flashcards, study records, and per-user study histories.

use std::borrow::Borrow;
use std::fmt;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const SECONDS_PER_HOUR: i64 = 3_600;
pub const SECONDS_PER_DAY: i64 = 86_400;

macro_rules! string_id {
    ($(#[$meta:meta])* $name:ident) => {
        $(#[$meta])*
        #[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
        #[serde(transparent)]
        pub struct $name(String);

        impl $name {
            pub fn new(id: impl Into<String>) -> Self {
                Self(id.into())
            }

            pub fn as_str(&self) -> &str {
                &self.0
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(&self.0)
            }
        }

        impl Borrow<str> for $name {
            fn borrow(&self) -> &str {
                &self.0
            }
        }

        impl From<&str> for $name {
            fn from(s: &str) -> Self {
                Self(s.to_owned())
            }
        }

        impl From<String> for $name {
            fn from(s: String) -> Self {
                Self(s)
            }
        }
    };
}

string_id!(
    /// Opaque user identifier.
    UserId
);
string_id!(
    /// Opaque flashcard identifier, unique within a corpus.
    CardId
);

/// UTC instant with one-second resolution, stored as epoch seconds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Timestamp(pub i64);

impl Timestamp {
    pub fn seconds(self) -> i64 {
        self.0
    }

    pub fn plus_seconds(self, s: i64) -> Self {
        Timestamp(self.0 + s)
    }

    pub fn plus_days(self, days: i64) -> Self {
        Timestamp(self.0 + days * SECONDS_PER_DAY)
    }

    /// Hours elapsed from `earlier` to `self` (negative if `earlier` is later).
    pub fn hours_since(self, earlier: Timestamp) -> f64 {
        (self.0 - earlier.0) as f64 / SECONDS_PER_HOUR as f64
    }

    pub fn days_since(self, earlier: Timestamp) -> f64 {
        (self.0 - earlier.0) as f64 / SECONDS_PER_DAY as f64
    }

    pub fn to_rfc3339(self) -> String {
        chrono::DateTime::from_timestamp(self.0, 0)
            .map(|dt| dt.format("%Y-%m-%dT%H:%M:%SZ").to_string())
            .unwrap_or_else(|| self.0.to_string())
    }
}

impl fmt::Display for Timestamp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Binary study outcome.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(into = "u8", try_from = "u8")]
pub struct Label(bool);

impl Label {
    pub const CORRECT: Label = Label(true);
    pub const INCORRECT: Label = Label(false);

    pub fn new(correct: bool) -> Self {
        Label(correct)
    }

    pub fn from_int(v: i64) -> Option<Self> {
        match v {
            0 => Some(Label(false)),
            1 => Some(Label(true)),
            _ => None,
        }
    }

    pub fn is_correct(self) -> bool {
        self.0
    }

    pub fn as_f64(self) -> f64 {
        if self.0 {
            1.0
        } else {
            0.0
        }
    }
}

impl From<Label> for u8 {
    fn from(l: Label) -> u8 {
        l.0 as u8
    }
}

impl TryFrom<u8> for Label {
    type Error = String;

    fn try_from(v: u8) -> Result<Self, Self::Error> {
        Label::from_int(v as i64).ok_or_else(|| format!("response must be 0 or 1, got {v}"))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Flashcard {
    pub card_id: CardId,
    pub front_text: String,
    #[serde(default)]
    pub back_text: String,
    pub deck_id: String,
    #[serde(default)]
    pub deck_name: String,
}

impl Flashcard {
    pub fn new(card_id: impl Into<CardId>, front_text: impl Into<String>, deck_id: impl Into<String>) -> Self {
        Self {
            card_id: card_id.into(),
            front_text: front_text.into(),
            back_text: String::new(),
            deck_id: deck_id.into(),
            deck_name: String::new(),
        }
    }

    pub fn validate(&self) -> Result<(), DomainError> {
        if self.card_id.as_str().is_empty() {
            return Err(DomainError::EmptyCardId);
        }
        if self.front_text.is_empty() {
            return Err(DomainError::EmptyFront(self.card_id.clone()));
        }
        Ok(())
    }
}

/// One timestamped study event.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StudyRecord {
    pub user_id: UserId,
    pub card_id: CardId,
    pub timestamp: Timestamp,
    pub response: Label,
    pub elapsed_ms: u64,
    #[serde(default)]
    pub deck_id: String,
}

impl StudyRecord {
    pub fn new(user_id: impl Into<UserId>, card_id: impl Into<CardId>, timestamp: Timestamp, correct: bool) -> Self {
        Self {
            user_id: user_id.into(),
            card_id: card_id.into(),
            timestamp,
            response: Label::new(correct),
            elapsed_ms: 0,
            deck_id: String::new(),
        }
    }

    pub fn is_correct(&self) -> bool {
        self.response.is_correct()
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum DomainError {
    #[error("record at {record} precedes the last history timestamp {last}")]
    OutOfOrderTimestamp { last: Timestamp, record: Timestamp },
    #[error("record belongs to user {record} but history belongs to {history}")]
    UserMismatch { history: UserId, record: UserId },
    #[error("record card {record} does not match flashcard {card}")]
    CardMismatch { card: CardId, record: CardId },
    #[error("card id is empty")]
    EmptyCardId,
    #[error("card {0} has empty front text")]
    EmptyFront(CardId),
    #[error("duplicate card id {0}")]
    DuplicateCard(CardId),
}

/// Chronological log of one user's studies.
///
/// Records with equal timestamps keep insertion order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StudyHistory {
    user_id: UserId,
    records: Vec<StudyRecord>,
}

impl StudyHistory {
    pub fn new(user_id: impl Into<UserId>) -> Self {
        Self {
            user_id: user_id.into(),
            records: Vec::new(),
        }
    }

    pub fn user_id(&self) -> &UserId {
        &self.user_id
    }

    pub fn records(&self) -> &[StudyRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn last_timestamp(&self) -> Option<Timestamp> {
        self.records.last().map(|r| r.timestamp)
    }

    /// Checks that `record` may be appended without breaking the history invariants.
    pub fn check_append(&self, record: &StudyRecord) -> Result<(), DomainError> {
        if record.user_id != self.user_id {
            return Err(DomainError::UserMismatch {
                history: self.user_id.clone(),
                record: record.user_id.clone(),
            });
        }
        if let Some(last) = self.last_timestamp() {
            if record.timestamp < last {
                return Err(DomainError::OutOfOrderTimestamp {
                    last,
                    record: record.timestamp,
                });
            }
        }
        Ok(())
    }

    pub fn push(&mut self, record: StudyRecord) -> Result<(), DomainError> {
        self.check_append(&record)?;
        self.records.push(record);
        Ok(())
    }

    /// Returns a new history with `record` appended; `self` is left untouched.
    pub fn append_record(&self, card: &Flashcard, record: StudyRecord) -> Result<StudyHistory, DomainError> {
        if card.card_id != record.card_id {
            return Err(DomainError::CardMismatch {
                card: card.card_id.clone(),
                record: record.card_id,
            });
        }
        let mut next = self.clone();
        next.push(record)?;
        Ok(next)
    }

    pub fn seen(&self, card_id: &str) -> bool {
        self.records.iter().any(|r| r.card_id.as_str() == card_id)
    }

    /// Records strictly before `now`.
    pub fn before(&self, now: Timestamp) -> &[StudyRecord] {
        let end = self.records.partition_point(|r| r.timestamp < now);
        &self.records[..end]
    }

    pub fn seen_before(&self, card_id: &str, now: Timestamp) -> bool {
        self.before(now).iter().any(|r| r.card_id.as_str() == card_id)
    }
}

/// The set of known flashcards, in insertion order.
#[derive(Debug, Clone, Default)]
pub struct Corpus {
    cards: IndexMap<CardId, Flashcard>,
}

impl Corpus {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, card: Flashcard) -> Result<(), DomainError> {
        card.validate()?;
        if self.cards.contains_key(card.card_id.as_str()) {
            return Err(DomainError::DuplicateCard(card.card_id));
        }
        self.cards.insert(card.card_id.clone(), card);
        Ok(())
    }

    /// Inserts or replaces a card.
    pub fn upsert(&mut self, card: Flashcard) {
        self.cards.insert(card.card_id.clone(), card);
    }

    pub fn get(&self, card_id: &str) -> Option<&Flashcard> {
        self.cards.get(card_id)
    }

    pub fn contains(&self, card_id: &str) -> bool {
        self.cards.contains_key(card_id)
    }

    pub fn len(&self) -> usize {
        self.cards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cards.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Flashcard> {
        self.cards.values()
    }

    pub fn deck(&self, deck_id: &str) -> Vec<&Flashcard> {
        self.cards.values().filter(|c| c.deck_id == deck_id).collect()
    }
}
