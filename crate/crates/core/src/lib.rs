//! Content-aware spaced-repetition engine.
//!
//! Predicts per-card recall from a student's study history plus precomputed
//! text embeddings, schedules reviews, and evaluates student models.

pub mod baselines;
pub mod classifier;
pub mod config;
pub mod dataset;
pub mod domain;
pub mod eval;
pub mod features;
pub mod ingestion;
pub mod model;
pub mod policy;
pub mod retrieval;
pub mod testmode;

pub use domain::{CardId, Corpus, Flashcard, Label, StudyHistory, StudyRecord, Timestamp, UserId};
