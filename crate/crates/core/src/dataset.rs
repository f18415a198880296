//! A chronologically ordered study log with per-user histories and global card statistics.

use std::collections::HashMap;

use crate::domain::{DomainError, StudyHistory, StudyRecord, UserId};
use crate::features::CardStats;

/// Share of records, in global time order, used for training.
pub const TRAIN_FRACTION: f64 = 0.75;

#[derive(Debug, Clone)]
pub struct StudyLog {
    records: Vec<StudyRecord>,
    histories: HashMap<UserId, StudyHistory>,
    stats: CardStats,
}

impl StudyLog {
    /// Sorts `records` by timestamp (stable, so same-instant records keep
    /// their input order) and indexes them.
    pub fn new(mut records: Vec<StudyRecord>) -> Result<Self, DomainError> {
        records.sort_by_key(|r| r.timestamp);
        let mut histories: HashMap<UserId, StudyHistory> = HashMap::new();
        for r in &records {
            histories
                .entry(r.user_id.clone())
                .or_insert_with(|| StudyHistory::new(r.user_id.clone()))
                .push(r.clone())?;
        }
        let stats = CardStats::from_records(&records);
        Ok(Self { records, histories, stats })
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

    pub fn history(&self, user: &str) -> Option<&StudyHistory> {
        self.histories.get(user)
    }

    pub fn users(&self) -> impl Iterator<Item = &UserId> {
        self.histories.keys()
    }

    pub fn stats(&self) -> &CardStats {
        &self.stats
    }

    /// Index of the first evaluation record: `ceil(fraction * len)`.
    pub fn split_index(&self, fraction: f64) -> usize {
        ((fraction * self.records.len() as f64).ceil() as usize).min(self.records.len())
    }

    pub fn default_split(&self) -> usize {
        self.split_index(TRAIN_FRACTION)
    }
}
