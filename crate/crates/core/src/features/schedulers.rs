//! Leitner and SM-2 card states folded from binary study outcomes.

use serde::{Deserialize, Serialize};

pub const LEITNER_MAX_BOX: u32 = 10;

/// Leitner box position; the review interval for box `b` is `2^b` days.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct LeitnerState {
    pub box_index: u32,
}

impl LeitnerState {
    pub fn apply(self, correct: bool) -> Self {
        let box_index = if correct {
            (self.box_index + 1).min(LEITNER_MAX_BOX)
        } else {
            self.box_index.saturating_sub(1)
        };
        Self { box_index }
    }

    pub fn fold(responses: impl IntoIterator<Item = bool>) -> Self {
        responses.into_iter().fold(Self::default(), Self::apply)
    }

    pub fn interval_days(self) -> f64 {
        2f64.powi(self.box_index as i32)
    }
}

/// SM-2 quality for a binary outcome.
pub fn sm2_quality(correct: bool) -> u8 {
    if correct {
        4
    } else {
        1
    }
}

pub const SM2_INITIAL_EF: f64 = 2.5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Sm2State {
    pub efactor: f64,
    /// Days.
    pub interval: f64,
    pub repetition: u32,
}

impl Default for Sm2State {
    fn default() -> Self {
        Self {
            efactor: SM2_INITIAL_EF,
            interval: 0.0,
            repetition: 0,
        }
    }
}

impl Sm2State {
    pub fn apply(self, correct: bool) -> Self {
        let q = sm2_quality(correct) as f64;
        let (repetition, interval) = if q >= 3.0 {
            let rep = self.repetition + 1;
            let interval = match rep {
                1 => 1.0,
                2 => 6.0,
                _ => self.interval * self.efactor,
            };
            (rep, interval)
        } else {
            (0, 1.0)
        };
        let efactor = (self.efactor + (0.1 - (5.0 - q) * (0.08 + (5.0 - q) * 0.02))).clamp(0.0, SM2_INITIAL_EF);
        Self { efactor, interval, repetition }
    }

    pub fn fold(responses: impl IntoIterator<Item = bool>) -> Self {
        responses.into_iter().fold(Self::default(), Self::apply)
    }
}
