//! Reference student models: Leitner, SM-2, half-life regression, and a
//! simplified FSRS-style retrievability model.
//!
//! History-only baselines cannot tell unseen cards apart, so all four predict
//! 0 for a card the user has never studied.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{StudyRecord, Timestamp};
use crate::features::{Feature, LeitnerState};
use crate::model::{ModelError, RecallPrediction, StudentModel, StudentView};

pub const LEITNER_PREDICTION_SLOTS: u32 = 5;
pub const HLR_EXPONENT_BOUND: f64 = 12.0;
pub const FSRS_TAG: &str = "fsrs-simplified";

#[derive(Debug, Error)]
pub enum BaselineError {
    #[error("training split is empty")]
    EmptySplit,
    #[error("weights file line {line}: {reason}")]
    Parse { line: usize, reason: String },
}

pub fn leitner_probability(state: LeitnerState) -> f64 {
    (state.box_index.min(LEITNER_PREDICTION_SLOTS) as f64 / LEITNER_PREDICTION_SLOTS as f64).clamp(0.0, 1.0)
}

/// Slot position over five slots.
#[derive(Debug, Clone, Copy, Default)]
pub struct LeitnerModel;

impl StudentModel for LeitnerModel {
    fn tag(&self) -> &str {
        "leitner"
    }

    fn predict(&self, view: &StudentView<'_>, card: &str, now: Timestamp) -> Result<RecallPrediction, ModelError> {
        let state = LeitnerState::fold(view.records(now).filter(|r| r.card_id.as_str() == card).map(StudyRecord::is_correct));
        Ok(RecallPrediction::new(leitner_probability(state), self.tag()))
    }
}

/// `clamp(repetition / 5, 0, 1) * acc_usercard`.
pub fn sm2_probability(repetition: u32, acc_usercard: f64) -> f64 {
    ((repetition as f64 / 5.0).clamp(0.0, 1.0) * acc_usercard).clamp(0.0, 1.0)
}

#[derive(Debug, Clone, Copy, Default)]
pub struct Sm2Model;

impl StudentModel for Sm2Model {
    fn tag(&self) -> &str {
        "sm2"
    }

    fn predict(&self, view: &StudentView<'_>, card: &str, now: Timestamp) -> Result<RecallPrediction, ModelError> {
        let replay = view.replay(now);
        let v = replay.features(card, now, &view.feature_context());
        let p = sm2_probability(v[Feature::Sm2Repetition] as u32, v[Feature::AccUsercard]);
        Ok(RecallPrediction::new(p, self.tag()))
    }
}

/// Half-life regression coefficients over `(1, sqrt(n_correct), sqrt(n_incorrect))`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HlrWeights {
    pub bias: f64,
    pub sqrt_correct: f64,
    pub sqrt_incorrect: f64,
}

impl Default for HlrWeights {
    fn default() -> Self {
        Self {
            bias: 0.0,
            sqrt_correct: 0.0,
            sqrt_incorrect: 0.0,
        }
    }
}

impl HlrWeights {
    pub fn new(bias: f64, sqrt_correct: f64, sqrt_incorrect: f64) -> Self {
        Self {
            bias,
            sqrt_correct,
            sqrt_incorrect,
        }
    }

    fn as_array(&self) -> [f64; 3] {
        [self.bias, self.sqrt_correct, self.sqrt_incorrect]
    }

    fn from_array(a: [f64; 3]) -> Self {
        Self::new(a[0], a[1], a[2])
    }

    /// Plain-text `key=value` form.
    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        for (k, v) in [
            ("bias", self.bias),
            ("sqrt_correct", self.sqrt_correct),
            ("sqrt_incorrect", self.sqrt_incorrect),
        ] {
            // `{:?}` on f64 is the shortest round-tripping representation.
            let _ = writeln!(s, "{k}={v:?}");
        }
        s
    }

    pub fn from_kv(text: &str) -> Result<Self, BaselineError> {
        let mut map = BTreeMap::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| BaselineError::Parse {
                line: i + 1,
                reason: "expected key=value".into(),
            })?;
            let v: f64 = v.trim().parse().map_err(|e| BaselineError::Parse {
                line: i + 1,
                reason: format!("{e}"),
            })?;
            if !v.is_finite() {
                return Err(BaselineError::Parse {
                    line: i + 1,
                    reason: "weight is not finite".into(),
                });
            }
            map.insert(k.trim().to_owned(), v);
        }
        let get = |k: &str| {
            map.get(k).copied().ok_or_else(|| BaselineError::Parse {
                line: 0,
                reason: format!("missing key {k}"),
            })
        };
        Ok(Self::new(get("bias")?, get("sqrt_correct")?, get("sqrt_incorrect")?))
    }
}

fn hlr_inputs(n_correct: f64, n_incorrect: f64) -> [f64; 3] {
    [1.0, n_correct.sqrt(), n_incorrect.sqrt()]
}

fn dot3(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub fn half_life_hours(weights: &HlrWeights, n_correct: f64, n_incorrect: f64) -> f64 {
    let s = dot3(weights.as_array(), hlr_inputs(n_correct, n_incorrect));
    2f64.powf(s.clamp(-HLR_EXPONENT_BOUND, HLR_EXPONENT_BOUND))
}

/// Recall probability `2^(-delta/h)`.
pub fn hlr_predict(weights: &HlrWeights, n_correct: f64, n_incorrect: f64, delta_hours: f64) -> RecallPrediction {
    let h = half_life_hours(weights, n_correct, n_incorrect);
    RecallPrediction::new(2f64.powf(-delta_hours.max(0.0) / h), "hlr")
}

/// One HLR training example.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HlrExample {
    pub n_correct: f64,
    pub n_incorrect: f64,
    pub delta_hours: f64,
    pub label: f64,
}

/// Mean squared error between predicted recall and labels.
pub fn hlr_loss(weights: &HlrWeights, data: &[HlrExample]) -> f64 {
    if data.is_empty() {
        return 0.0;
    }
    data.iter()
        .map(|e| {
            let p = hlr_predict(weights, e.n_correct, e.n_incorrect, e.delta_hours).probability;
            (p - e.label).powi(2)
        })
        .sum::<f64>()
        / data.len() as f64
}

fn example_gradient(w: [f64; 3], e: &HlrExample) -> [f64; 3] {
    let x = hlr_inputs(e.n_correct, e.n_incorrect);
    let s = dot3(w, x);
    if s.abs() >= HLR_EXPONENT_BOUND {
        return [0.0; 3];
    }
    let ln2 = std::f64::consts::LN_2;
    let delta = e.delta_hours.max(0.0);
    let p = (-ln2 * delta * 2f64.powf(-s)).exp();
    let dp_ds = p * delta * ln2 * ln2 * 2f64.powf(-s);
    let g = 2.0 * (p - e.label) * dp_ds;
    [g * x[0], g * x[1], g * x[2]]
}

/// Analytic gradient of [`hlr_loss`].
pub fn hlr_gradient(weights: &HlrWeights, data: &[HlrExample]) -> [f64; 3] {
    let mut g = [0.0; 3];
    let w = weights.as_array();
    for e in data {
        let ge = example_gradient(w, e);
        for j in 0..3 {
            g[j] += ge[j];
        }
    }
    let n = data.len().max(1) as f64;
    g.map(|x| x / n)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HlrFitConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for HlrFitConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.01,
            epochs: 200,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct HlrFit {
    pub weights: HlrWeights,
    /// Training loss before the first epoch and after each epoch.
    pub losses: Vec<f64>,
}

/// Fits HLR weights by shuffled per-example gradient descent on squared error.
///
/// An epoch whose result would raise the full training loss is rolled back and
/// the step size halved, so the recorded losses never increase.
pub fn hlr_fit(data: &[HlrExample], config: &HlrFitConfig) -> Result<HlrFit, BaselineError> {
    if data.is_empty() {
        return Err(BaselineError::EmptySplit);
    }
    let mean_delta = data.iter().map(|e| e.delta_hours.max(0.0)).sum::<f64>() / data.len() as f64;
    let mut w = [(mean_delta + 1.0).log2(), 0.0, 0.0];
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut lr = config.learning_rate;
    let mut loss = hlr_loss(&HlrWeights::from_array(w), data);
    let mut losses = vec![loss];
    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut trial = w;
        for &i in &order {
            let g = example_gradient(trial, &data[i]);
            for j in 0..3 {
                trial[j] -= lr * g[j];
            }
        }
        let trial_loss = hlr_loss(&HlrWeights::from_array(trial), data);
        if trial_loss <= loss {
            w = trial;
            loss = trial_loss;
        } else {
            lr *= 0.5;
        }
        losses.push(loss);
    }
    Ok(HlrFit {
        weights: HlrWeights::from_array(w),
        losses,
    })
}

/// HLR examples for every record of a chronologically sorted log: counts and
/// elapsed time before each record. First studies of a card are skipped.
pub fn hlr_examples<'a>(records: impl IntoIterator<Item = &'a StudyRecord>) -> Vec<HlrExample> {
    use std::collections::HashMap;
    let mut state: HashMap<(&str, &str), (f64, f64, Timestamp)> = HashMap::new();
    let mut out = Vec::new();
    for r in records {
        let key = (r.user_id.as_str(), r.card_id.as_str());
        let entry = state.entry(key).or_insert((0.0, 0.0, r.timestamp));
        if entry.0 + entry.1 > 0.0 {
            out.push(HlrExample {
                n_correct: entry.0,
                n_incorrect: entry.1,
                delta_hours: r.timestamp.hours_since(entry.2),
                label: r.response.as_f64(),
            });
        }
        if r.is_correct() {
            entry.0 += 1.0;
        } else {
            entry.1 += 1.0;
        }
        entry.2 = r.timestamp;
    }
    out
}

#[derive(Debug, Clone, Copy, Default)]
pub struct HlrModel {
    pub weights: HlrWeights,
}

impl StudentModel for HlrModel {
    fn tag(&self) -> &str {
        "hlr"
    }

    fn predict(&self, view: &StudentView<'_>, card: &str, now: Timestamp) -> Result<RecallPrediction, ModelError> {
        let mut counts = (0.0, 0.0);
        let mut last = None;
        for r in view.records(now).filter(|r| r.card_id.as_str() == card) {
            if r.is_correct() {
                counts.0 += 1.0;
            } else {
                counts.1 += 1.0;
            }
            last = Some(r.timestamp);
        }
        let Some(last) = last else {
            return Ok(RecallPrediction::new(0.0, self.tag()));
        };
        let p = hlr_predict(&self.weights, counts.0, counts.1, now.hours_since(last));
        Ok(RecallPrediction::new(p.probability, self.tag()))
    }
}

pub const FSRS_GROWTH: f64 = 3.0;
pub const FSRS_LAPSE_FACTOR: f64 = 0.3;
pub const FSRS_MIN_STABILITY: f64 = 0.1;

/// Simplified memory state: stability in days and difficulty in `[1, 10]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FsrsState {
    pub stability: f64,
    pub difficulty: f64,
}

impl Default for FsrsState {
    fn default() -> Self {
        Self {
            stability: 1.0,
            difficulty: 5.0,
        }
    }
}

pub fn fsrs_retrievability(state: &FsrsState, delta_days: f64) -> f64 {
    1.0 / (1.0 + delta_days.max(0.0) / (9.0 * state.stability))
}

pub fn fsrs_predict(state: &FsrsState, delta_days: f64) -> RecallPrediction {
    RecallPrediction::new(fsrs_retrievability(state, delta_days), FSRS_TAG)
}

pub fn fsrs_update(state: &FsrsState, correct: bool, delta_days: f64) -> FsrsState {
    if correct {
        let r = fsrs_retrievability(state, delta_days);
        FsrsState {
            stability: state.stability * (1.0 + FSRS_GROWTH * (1.0 - r)),
            difficulty: (state.difficulty - 0.5).clamp(1.0, 10.0),
        }
    } else {
        FsrsState {
            stability: (state.stability * FSRS_LAPSE_FACTOR).max(FSRS_MIN_STABILITY),
            difficulty: (state.difficulty + 0.5).clamp(1.0, 10.0),
        }
    }
}

/// Folds one card's studies into a state; returns it with the last study time.
pub fn fsrs_fold<'a>(records: impl IntoIterator<Item = &'a StudyRecord>) -> Option<(FsrsState, Timestamp)> {
    let mut out: Option<(FsrsState, Timestamp)> = None;
    for r in records {
        let (state, last) = out.unwrap_or((FsrsState::default(), r.timestamp));
        let next = fsrs_update(&state, r.is_correct(), r.timestamp.days_since(last));
        out = Some((next, r.timestamp));
    }
    out
}

#[derive(Debug, Clone, Copy, Default)]
pub struct FsrsModel;

impl StudentModel for FsrsModel {
    fn tag(&self) -> &str {
        FSRS_TAG
    }

    fn predict(&self, view: &StudentView<'_>, card: &str, now: Timestamp) -> Result<RecallPrediction, ModelError> {
        let p = match fsrs_fold(view.records(now).filter(|r| r.card_id.as_str() == card)) {
            Some((state, last)) => fsrs_retrievability(&state, now.days_since(last)),
            None => 0.0,
        };
        Ok(RecallPrediction::new(p, self.tag()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::StudyHistory;
    use crate::features::CardStats;
    use rand::Rng;

    fn history(seq: &[(i64, bool)]) -> StudyHistory {
        let mut h = StudyHistory::new("u");
        for &(t, ok) in seq {
            h.push(StudyRecord::new("u", "c", Timestamp(t), ok)).unwrap();
        }
        h
    }

    fn predict(model: &dyn StudentModel, h: &StudyHistory, now: i64) -> f64 {
        let stats = CardStats::from_records(h.records());
        model.predict(&StudentView::new(h, &stats), "c", Timestamp(now)).unwrap().probability
    }

    #[test]
    fn leitner_examples() {
        assert_eq!(predict(&LeitnerModel, &history(&[]), 10), 0.0);
        assert_eq!(predict(&LeitnerModel, &history(&[(0, true), (1, true), (2, true)]), 10), 0.6);
        let five: Vec<_> = (0..7).map(|t| (t, true)).collect();
        assert_eq!(predict(&LeitnerModel, &history(&five), 10), 1.0);
    }

    #[test]
    fn sm2_examples() {
        assert_eq!(predict(&Sm2Model, &history(&[]), 10), 0.0);
        let five: Vec<_> = (0..5).map(|t| (t, true)).collect();
        assert_eq!(predict(&Sm2Model, &history(&five), 10), 1.0);
        assert!((sm2_probability(2, 0.5) - 0.2).abs() < 1e-15);
    }

    #[test]
    fn hlr_examples() {
        let w = HlrWeights::new(1.0, 0.0, 0.0);
        assert_eq!(hlr_predict(&w, 0.0, 0.0, 0.0).probability, 1.0);
        assert_eq!(hlr_predict(&w, 0.0, 0.0, 2.0).probability, 0.5);
        let h = half_life_hours(&HlrWeights::new(3.0, 0.5, 0.0), 4.0, 0.0);
        assert!((hlr_predict(&HlrWeights::new(3.0, 0.5, 0.0), 4.0, 0.0, h).probability - 0.5).abs() < 1e-15);
        // exponent clamp
        assert_eq!(half_life_hours(&HlrWeights::new(100.0, 0.0, 0.0), 0.0, 0.0), 4096.0);
    }

    #[test]
    fn hlr_monotone_in_delta() {
        let w = HlrWeights::new(2.0, 0.3, -0.2);
        let mut prev = 1.0;
        for d in 0..100 {
            let p = hlr_predict(&w, 3.0, 1.0, d as f64).probability;
            assert!(p <= prev);
            prev = p;
        }
    }

    #[test]
    fn hlr_weights_round_trip_kv() {
        let w = HlrWeights::new(2.123456789012345, -0.1, 1e-17);
        assert_eq!(HlrWeights::from_kv(&w.to_kv()).unwrap(), w);
        assert!(HlrWeights::from_kv("bias=1\n").is_err());
        assert!(HlrWeights::from_kv("bias=x\n").is_err());
    }

    #[test]
    fn hlr_all_ones_at_zero_delta_has_zero_loss() {
        let data: Vec<_> = (0..10)
            .map(|i| HlrExample {
                n_correct: i as f64,
                n_incorrect: 1.0,
                delta_hours: 0.0,
                label: 1.0,
            })
            .collect();
        let w = HlrWeights::new(0.3, -1.2, 0.7);
        assert_eq!(hlr_loss(&w, &data), 0.0);
        assert!(hlr_gradient(&w, &data).iter().all(|g| g.abs() < 1e-15));
    }

    fn synthetic(truth: HlrWeights, n: usize, seed: u64) -> Vec<HlrExample> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let nc = rng.random_range(0..12) as f64;
                let ni = rng.random_range(0..6) as f64;
                let h = half_life_hours(&truth, nc, ni);
                let delta = h * 2f64.powf(rng.random_range(-3.0..3.0));
                let p = hlr_predict(&truth, nc, ni, delta).probability;
                HlrExample {
                    n_correct: nc,
                    n_incorrect: ni,
                    delta_hours: delta,
                    label: if rng.random_bool(p) { 1.0 } else { 0.0 },
                }
            })
            .collect()
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let data = synthetic(HlrWeights::new(3.0, 0.6, -0.4), 300, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..10 {
            let w = [rng.random_range(1.0..5.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
            let g = hlr_gradient(&HlrWeights::from_array(w), &data);
            for j in 0..3 {
                let h = 1e-6;
                let (mut a, mut b) = (w, w);
                a[j] += h;
                b[j] -= h;
                let fd = (hlr_loss(&HlrWeights::from_array(a), &data) - hlr_loss(&HlrWeights::from_array(b), &data)) / (2.0 * h);
                let rel = (fd - g[j]).abs() / fd.abs().max(g[j].abs()).max(1e-10);
                assert!(rel < 1e-4, "param {j}: analytic {} vs fd {fd}", g[j]);
            }
        }
    }

    #[test]
    fn fit_recovers_generating_weights() {
        let truth = HlrWeights::new(4.0, 0.8, -0.5);
        let data = synthetic(truth, 20_000, 3);
        let fit = hlr_fit(&data, &HlrFitConfig::default()).unwrap();
        let err = fit
            .weights
            .as_array()
            .iter()
            .zip(truth.as_array())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(err < 0.1, "recovered {:?}, err {err}", fit.weights);
        assert!(fit.losses.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn fit_rejects_empty_and_is_deterministic() {
        assert!(matches!(hlr_fit(&[], &HlrFitConfig::default()), Err(BaselineError::EmptySplit)));
        let data = synthetic(HlrWeights::new(3.0, 0.5, 0.0), 500, 4);
        let cfg = HlrFitConfig {
            epochs: 20,
            ..Default::default()
        };
        assert_eq!(hlr_fit(&data, &cfg).unwrap().weights, hlr_fit(&data, &cfg).unwrap().weights);
    }

    #[test]
    fn fsrs_examples() {
        let s = FsrsState::default();
        assert_eq!(fsrs_predict(&s, 0.0).probability, 1.0);
        assert_eq!(fsrs_predict(&s, 9.0).probability, 0.5);
        let s2 = FsrsState {
            stability: 2.0,
            difficulty: 5.0,
        };
        assert_eq!(fsrs_predict(&s2, 18.0).probability, 0.5);
        assert_eq!(fsrs_update(&s, true, 0.0).stability, 1.0);
        assert!((fsrs_update(&s2, false, 3.0).stability - 0.6).abs() < 1e-15);
        let tiny = FsrsState {
            stability: 0.2,
            difficulty: 10.0,
        };
        let lapsed = fsrs_update(&tiny, false, 1.0);
        assert_eq!(lapsed.stability, 0.1);
        assert_eq!(lapsed.difficulty, 10.0);
    }

    #[test]
    fn fsrs_fold_matches_step_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut t = 0i64;
        let mut seq = Vec::new();
        for _ in 0..10 {
            t += rng.random_range(0..5 * 86_400);
            seq.push((t, rng.random_bool(0.7)));
        }
        let h = history(&seq);
        let (state, last) = fsrs_fold(h.records()).unwrap();
        let mut s = 1.0f64;
        let mut d = 5.0f64;
        let mut prev = seq[0].0;
        for &(ts, ok) in &seq {
            let dd = (ts - prev) as f64 / 86_400.0;
            if ok {
                let r = 1.0 / (1.0 + dd / (9.0 * s));
                s *= 1.0 + 3.0 * (1.0 - r);
                d = (d - 0.5).max(1.0);
            } else {
                s = (s * 0.3).max(0.1);
                d = (d + 0.5).min(10.0);
            }
            prev = ts;
        }
        assert_eq!(last, Timestamp(seq[9].0));
        assert!((state.stability - s).abs() < 1e-12 && (state.difficulty - d).abs() < 1e-12);
    }

    #[test]
    fn predictions_stay_in_unit_interval_and_unseen_is_zero() {
        let h = history(&[(0, true), (100, false), (50_000, true)]);
        let models: Vec<Box<dyn StudentModel>> = vec![
            Box::new(LeitnerModel),
            Box::new(Sm2Model),
            Box::new(HlrModel {
                weights: HlrWeights::new(3.0, 0.5, -0.5),
            }),
            Box::new(FsrsModel),
        ];
        let stats = CardStats::from_records(h.records());
        for m in &models {
            for now in [1, 200, 60_000, 10_000_000] {
                let p = predict(m.as_ref(), &h, now);
                assert!((0.0..=1.0).contains(&p));
            }
            let unseen = m.predict(&StudentView::new(&h, &stats), "other", Timestamp(1_000)).unwrap();
            assert_eq!(unseen.probability, 0.0, "{}", m.tag());
        }
    }
}
