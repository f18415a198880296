//! Acceptance suite. Prints one `[PASS]`, `[FAIL]` or `[SKIP]` line per
//! criterion and exits non-zero if any criterion fails.
//!
//! Optional inputs: `RECALL_DATASET` (released study log, JSONL or CSV) and
//! `RECALL_EMBEDDINGS` (embedding file matching its cards).

mod common;

use recall_service::{router, AppState, Engine, EngineOptions};

use std::collections::{BTreeMap, HashMap};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::Arc;
use std::time::{Duration, Instant};

use ndarray::Array2;
use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use recall_core::baselines::{half_life_hours, hlr_examples, hlr_fit, HlrFitConfig, HlrModel, LeitnerModel};
use recall_core::classifier::network::{backward, batch_loss, forward_batch};
use recall_core::classifier::{train, ContentAwareModel, NetConfig, NetworkParams, RetrievalMode, TrainConfig, TrainedNet};
use recall_core::dataset::StudyLog;
use recall_core::eval::{auc, ece, forgetting_curve, generate, score_records, EvalReport, SyntheticData, SyntheticSpec, CURVE_DAYS};
use recall_core::features::{CardStats, Feature, FeatureVector, NUM_FEATURES};
use recall_core::ingestion::{build_histories, load_dataset, replay_features, validate_features, DatasetRow};
use recall_core::model::{StudentModel, StudentView};
use recall_core::policy::mock::BranchModel;
use recall_core::policy::{delta_score, schedule_delta, PolicyConfig};
use recall_core::retrieval::{score, top_k, EmbeddingStore, EmbeddingVector};
use recall_core::{CardId, StudyHistory, StudyRecord, Timestamp};

enum Verdict {
    Pass(String),
    Fail(String),
    Skip(String),
}

fn check(ok: bool, detail: String) -> Verdict {
    if ok {
        Verdict::Pass(detail)
    } else {
        Verdict::Fail(detail)
    }
}

/// Fails a verdict that passed but ran past `limit`.
fn within(limit: Duration, started: Instant, v: Verdict) -> Verdict {
    let took = started.elapsed();
    match v {
        Verdict::Pass(d) if took > limit => Verdict::Fail(format!("{d}; took {took:.1?}, limit {limit:?}")),
        Verdict::Pass(d) => Verdict::Pass(format!("{d}; {took:.1?}")),
        other => other,
    }
}

struct Suite {
    failures: usize,
}

impl Suite {
    fn run(&mut self, name: &str, f: impl FnOnce() -> Verdict) {
        let verdict = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into());
            Verdict::Fail(format!("panicked: {msg}"))
        });
        match verdict {
            Verdict::Pass(d) => println!("[PASS] {name}: {d}"),
            Verdict::Fail(d) => {
                self.failures += 1;
                println!("[FAIL] {name}: {d}");
            }
            Verdict::Skip(d) => println!("[SKIP] {name}: {d}"),
        }
    }
}

// Metric oracles.

fn pairwise_auc(scores: &[f64], labels: &[bool]) -> f64 {
    let mut wins = 0.0;
    let mut pairs = 0.0;
    for (i, &li) in labels.iter().enumerate() {
        if !li {
            continue;
        }
        for (j, &lj) in labels.iter().enumerate() {
            if lj {
                continue;
            }
            pairs += 1.0;
            if scores[i] > scores[j] {
                wins += 1.0;
            } else if scores[i] == scores[j] {
                wins += 0.5;
            }
        }
    }
    wins / pairs
}

fn metric_oracles() -> Verdict {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst: f64 = 0.0;
    for inst in 0..100 {
        let n = rng.random_range(2..=200);
        // Coarse scores on some instances force ties.
        let coarse = inst % 3 == 0;
        let scores: Vec<f64> = (0..n)
            .map(|_| {
                let s: f64 = rng.random();
                if coarse {
                    (s * 10.0).round() / 10.0
                } else {
                    s
                }
            })
            .collect();
        let mut labels: Vec<bool> = (0..n).map(|_| rng.random_bool(0.4)).collect();
        labels[0] = true;
        labels[1] = false;
        let got = auc(&scores, &labels).expect("both classes present");
        worst = worst.max((got - pairwise_auc(&scores, &labels)).abs());
    }

    let worked = ece(&[0.2, 0.2, 0.8, 0.8], &[false, true, true, true], 10).unwrap();
    let worked_err = (worked - 0.25).abs();

    // Each bin holds 20 rows scored at its center with exactly that share of positives.
    let mut scores = Vec::new();
    let mut labels = Vec::new();
    for b in 0..10 {
        let p = 0.05 + 0.1 * b as f64;
        let positives = (p * 20.0).round() as usize;
        for i in 0..20 {
            scores.push(p);
            labels.push(i < positives);
        }
    }
    let calibrated = ece(&scores, &labels, 10).unwrap();
    within(
        Duration::from_secs(5),
        started,
        check(
            worst <= 1e-12 && worked_err <= 1e-12 && calibrated < 1e-12,
            format!("max |auc - pairwise| = {worst:.1e} over 100 instances; worked ECE = {worked}; calibrated ECE = {calibrated:.1e}"),
        ),
    )
}

// Gradient check.

fn gradient_check() -> Verdict {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let mut worst: f64 = 0.0;
    let mut total_params = 0;
    for _ in 0..20 {
        let (input, hidden) = loop {
            let i = rng.random_range(2..=24);
            let h = rng.random_range(2..=40);
            let params = h * i + 4 * h + 1;
            if params <= 1000 {
                break (i, h);
            }
        };
        let mut params = NetworkParams::init(input, hidden, &mut rng);
        for t in params.tensors_mut() {
            for v in t.iter_mut() {
                *v += rng.random_range(-0.3..0.3);
            }
        }
        assert!(params.num_params() <= 1000);
        total_params += params.num_params();
        let batch = rng.random_range(1..=8);
        let x = Array2::from_shape_fn((batch, input), |_| rng.random_range(-2.0..2.0));
        let y: Vec<f64> = (0..batch).map(|_| if rng.random_bool(0.5) { 1.0 } else { 0.0 }).collect();

        let cache = forward_batch(&params, x.view(), None).unwrap();
        let grads = backward(&params, &cache, &y);
        let loss_at = |p: &NetworkParams| batch_loss(&forward_batch(p, x.view(), None).unwrap(), &y);
        let eps = 1e-6;
        for t in 0..6 {
            for j in 0..params.tensors()[t].len() {
                let mut plus = params.clone();
                plus.tensors_mut()[t][j] += eps;
                let mut minus = params.clone();
                minus.tensors_mut()[t][j] -= eps;
                let numeric = (loss_at(&plus) - loss_at(&minus)) / (2.0 * eps);
                let analytic = grads.tensors()[t][j];
                let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-7);
                worst = worst.max(rel);
            }
        }
    }
    within(
        Duration::from_secs(30),
        started,
        check(
            worst < 1e-4,
            format!("max relative error {worst:.2e} over {total_params} parameters in 20 nets"),
        ),
    )
}

// Retrieval exactness.

fn retrieval_exactness() -> Verdict {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(37);
    let mut checked = 0;
    let mut worst_naive: f64 = 0.0;
    for s in 0..50 {
        let n = if s == 0 { 10_000 } else { rng.random_range(1..=10_000) };
        let dim = rng.random_range(1..=64);
        let mut store = EmbeddingStore::new(dim);
        let mut vectors: Vec<Vec<f32>> = Vec::with_capacity(n);
        for i in 0..n {
            // Every 7th vector on some stores duplicates an earlier one, forcing score ties.
            let v = if s % 4 == 1 && i % 7 == 6 {
                vectors[i / 2].clone()
            } else {
                (0..dim).map(|_| rng.random_range(-1.0f32..1.0)).collect()
            };
            vectors.push(v.clone());
            store
                .insert(EmbeddingVector {
                    card_id: CardId::new(format!("v{i:05}")),
                    values: v,
                })
                .unwrap();
        }
        let query: Vec<f32> = (0..dim).map(|_| rng.random_range(-1.0f32..1.0)).collect();
        let ids: Vec<CardId> = (0..n).map(|i| CardId::new(format!("v{i:05}"))).collect();
        let candidates: Vec<&CardId> = if s % 2 == 0 {
            ids.iter().collect()
        } else {
            ids.iter().filter(|_| rng.random_bool(0.6)).collect()
        };

        let mut brute: Vec<(f64, &CardId)> = candidates
            .iter()
            .map(|id| {
                let v = store.get(id.as_str()).unwrap();
                let naive: f64 = query.iter().zip(v).map(|(a, b)| *a as f64 * *b as f64).sum();
                let exact = score(&query, v).unwrap();
                worst_naive = worst_naive.max((naive - exact).abs());
                (exact, *id)
            })
            .collect();
        brute.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| a.1.cmp(b.1)));
        for k in [0, 1, 5, 20] {
            let got = top_k(&store, &query, candidates.iter().copied(), k).unwrap();
            let want: Vec<(f64, &CardId)> = brute.iter().take(k).copied().collect();
            let have: Vec<(f64, &CardId)> = got.entries.iter().map(|e| (e.score, &e.card_id)).collect();
            if have != want {
                return Verdict::Fail(format!("store {s} (n={n}, dim={dim}), k={k}: top-k differs from the full scan"));
            }
            checked += 1;
        }
    }
    within(
        Duration::from_secs(60),
        started,
        check(
            worst_naive <= 1e-9,
            format!("{checked} (store, k) cases equal the full scan; max |score - naive sum| = {worst_naive:.1e}"),
        ),
    )
}

// Feature replay oracle. Recomputes every slot from a scan of all earlier
// records, sharing no code with the library's incremental replay.

fn oracle_leitner(outcomes: &[bool]) -> u32 {
    let mut b: u32 = 0;
    for &ok in outcomes {
        b = if ok { (b + 1).min(10) } else { b.saturating_sub(1) };
    }
    b
}

fn oracle_sm2(outcomes: &[bool]) -> (f64, f64, u32) {
    let (mut ef, mut interval, mut rep) = (2.5f64, 0.0f64, 0u32);
    for &ok in outcomes {
        let q: f64 = if ok { 4.0 } else { 1.0 };
        if ok {
            rep += 1;
            interval = match rep {
                1 => 1.0,
                2 => 6.0,
                _ => interval * ef,
            };
        } else {
            rep = 0;
            interval = 1.0;
        }
        ef = (ef + (0.1 - (5.0 - q) * (0.08 + (5.0 - q) * 0.02))).clamp(0.0, 2.5);
    }
    (ef, interval, rep)
}

fn acc(pos: usize, total: usize) -> f64 {
    if total == 0 {
        0.0
    } else {
        pos as f64 / total as f64
    }
}

fn oracle_features(rows: &[DatasetRow]) -> Vec<FeatureVector> {
    // Chronological order with file order breaking ties.
    let mut order: Vec<usize> = (0..rows.len()).collect();
    order.sort_by_key(|&i| (rows[i].utc_datetime, i));
    let by_user: HashMap<&str, Vec<usize>> = order.iter().fold(HashMap::new(), |mut m, &i| {
        m.entry(rows[i].user_id.as_str()).or_default().push(i);
        m
    });
    let by_card: HashMap<&str, Vec<usize>> = order.iter().fold(HashMap::new(), |mut m, &i| {
        m.entry(rows[i].card_id.as_str()).or_default().push(i);
        m
    });
    let hours = |a: Timestamp, b: Timestamp| (a.seconds() - b.seconds()) as f64 / 3600.0;
    let days = |a: Timestamp, b: Timestamp| (a.seconds() - b.seconds()) as f64 / 86400.0;
    let correct = |i: usize| rows[i].response.is_correct();

    rows.iter()
        .map(|row| {
            let now = row.utc_datetime;
            let card = row.card_id.as_str();
            let mine: Vec<usize> = by_user[row.user_id.as_str()].iter().copied().filter(|&j| rows[j].utc_datetime < now).collect();
            let everyone: Vec<usize> = by_card[card].iter().copied().filter(|&j| rows[j].utc_datetime < now).collect();
            let mine_card: Vec<usize> = mine.iter().copied().filter(|&j| rows[j].card_id.as_str() == card).collect();
            let mut v = [0.0; NUM_FEATURES];
            let set = |v: &mut [f64; NUM_FEATURES], f: Feature, x: f64| v[f.index()] = x;

            let up = mine.iter().filter(|&&j| correct(j)).count();
            set(&mut v, Feature::UserNStudyPositive, up as f64);
            set(&mut v, Feature::UserNStudyNegative, (mine.len() - up) as f64);
            set(&mut v, Feature::UserNStudyTotal, mine.len() as f64);
            set(&mut v, Feature::AccUser, acc(up, mine.len()));

            let cp = everyone.iter().filter(|&&j| correct(j)).count();
            set(&mut v, Feature::CardNStudyPositive, cp as f64);
            set(&mut v, Feature::CardNStudyNegative, (everyone.len() - cp) as f64);
            set(&mut v, Feature::CardNStudyTotal, everyone.len() as f64);
            set(&mut v, Feature::AccCard, acc(cp, everyone.len()));

            let outcomes: Vec<bool> = mine_card.iter().map(|&j| correct(j)).collect();
            let ucp = outcomes.iter().filter(|&&o| o).count();
            set(&mut v, Feature::IsNewFact, if outcomes.is_empty() { 1.0 } else { 0.0 });
            set(&mut v, Feature::UsercardNStudyPositive, ucp as f64);
            set(&mut v, Feature::UsercardNStudyNegative, (outcomes.len() - ucp) as f64);
            set(&mut v, Feature::UsercardNStudyTotal, outcomes.len() as f64);
            set(&mut v, Feature::AccUsercard, acc(ucp, outcomes.len()));

            let (ef, interval, rep) = oracle_sm2(&outcomes);
            set(&mut v, Feature::Sm2Efactor, ef);
            set(&mut v, Feature::Sm2Interval, interval);
            set(&mut v, Feature::Sm2Repetition, rep as f64);

            if let Some(&last) = mine_card.last() {
                let last_t = rows[last].utc_datetime;
                set(&mut v, Feature::UsercardDelta, hours(now, last_t));
                if mine_card.len() >= 2 {
                    set(
                        &mut v,
                        Feature::UsercardDeltaPrevious,
                        hours(last_t, rows[mine_card[mine_card.len() - 2]].utc_datetime),
                    );
                }
                set(&mut v, Feature::UsercardPrevResponse, if correct(last) { 1.0 } else { 0.0 });
                let b = oracle_leitner(&outcomes);
                set(&mut v, Feature::LeitnerBox, b as f64);
                set(&mut v, Feature::DeltaToLeitner, 2f64.powi(b as i32) - days(now, last_t));
                set(&mut v, Feature::DeltaToSm2, interval - days(now, last_t));
            }

            // The running session: the user's trailing records with gaps under 30 minutes.
            if let Some(&last) = mine.last() {
                if now.seconds() - rows[last].utc_datetime.seconds() < 1800 {
                    let mut start = mine.len() - 1;
                    while start > 0 && rows[mine[start]].utc_datetime.seconds() - rows[mine[start - 1]].utc_datetime.seconds() < 1800 {
                        start -= 1;
                    }
                    let session = &mine[start..];
                    let session_start = rows[session[0]].utc_datetime;
                    let sp = session.iter().filter(|&&j| correct(j)).count();
                    set(&mut v, Feature::SessionAccUser, acc(sp, session.len()));
                    let in_window: Vec<usize> = everyone.iter().copied().filter(|&j| rows[j].utc_datetime >= session_start).collect();
                    set(
                        &mut v,
                        Feature::SessionAccCard,
                        acc(in_window.iter().filter(|&&j| correct(j)).count(), in_window.len()),
                    );
                    let uc: Vec<usize> = session.iter().copied().filter(|&j| rows[j].card_id.as_str() == card).collect();
                    set(&mut v, Feature::SessionAccUsercard, acc(uc.iter().filter(|&&j| correct(j)).count(), uc.len()));
                }
            }
            FeatureVector(v)
        })
        .collect()
}

fn feature_replay_synthetic() -> Verdict {
    let started = Instant::now();
    let spec = SyntheticSpec { seed: 5, ..Default::default() };
    let data = generate(&spec, 20, 400, 10_000);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut rows: Vec<DatasetRow> = data
        .records
        .iter()
        .map(|r| DatasetRow::new(r.user_id.clone(), r.card_id.clone(), r.timestamp, r.is_correct()))
        .collect();
    // File order need not be chronological; equal timestamps must not see each other.
    for i in 0..rows.len() / 50 {
        let j = rng.random_range(0..rows.len());
        let t = rows[j].utc_datetime;
        rows[i * 50].utc_datetime = t;
    }
    rows.shuffle(&mut rng);
    let replayed = replay_features(&rows);
    let oracle = oracle_features(&rows);
    let mut mismatched_slots = BTreeMap::new();
    for (a, b) in replayed.iter().zip(&oracle) {
        for f in Feature::ALL {
            if a[f].to_bits() != b[f].to_bits() {
                *mismatched_slots.entry(f.id()).or_insert(0) += 1;
            }
        }
    }
    within(
        Duration::from_secs(120),
        started,
        check(
            mismatched_slots.is_empty(),
            format!(
                "{} records x {NUM_FEATURES} slots; bitwise mismatches per slot: {mismatched_slots:?}",
                rows.len()
            ),
        ),
    )
}

fn feature_replay_released() -> Verdict {
    let Ok(path) = std::env::var("RECALL_DATASET") else {
        return Verdict::Skip("set RECALL_DATASET to the released study log to run".into());
    };
    let rows = match load_dataset(&path) {
        Ok(r) => r,
        Err(e) => return Verdict::Fail(format!("{path}: {e}")),
    };
    let agreement = validate_features(&rows);
    match agreement.row_fraction() {
        None => Verdict::Fail(format!("{path}: no stored feature columns")),
        Some(f) => check(
            f >= 0.99,
            format!(
                "{} of {} rows match on every stored column ({:.4})",
                agreement.rows_matching, agreement.rows_compared, f
            ),
        ),
    }
}

// Delta policy algebra.

fn delta_algebra() -> Verdict {
    let now = Timestamp(1_000_000);
    let history = StudyHistory::new("u");
    let stats = CardStats::new();
    let view = StudentView::new(&history, &stats);
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let mut worst: f64 = 0.0;
    let mut zero_ok = true;
    let mut max_scheduled = true;
    for inst in 0..1000 {
        let n = rng.random_range(1..=20);
        let mut table = HashMap::new();
        for c in 0..n {
            let row: [f64; 4] = if c == 0 && inst % 2 == 0 {
                let p = rng.random();
                [rng.random(), p, p, p]
            } else {
                [rng.random(), rng.random(), rng.random(), rng.random()]
            };
            table.insert(format!("c{c:02}"), row);
        }
        // A card unknown now that the study would lift the most.
        table.insert("zz".to_string(), [0.0, rng.random(), 1.0, 0.0]);
        let model = BranchModel { now, table: table.clone() };
        let interval = rng.random_range(1..=30) * 86_400;
        for (card, [p, pc, pi, pn]) in &table {
            let d = delta_score(&model, &view, card, now, interval).unwrap();
            let direct = pc * p + pi * (1.0 - p) - pn;
            worst = worst.max((d.score - direct).abs());
            if pc == pi && pi == pn && d.score != 0.0 {
                zero_ok = false;
            }
        }
        let candidates: Vec<CardId> = table.keys().map(CardId::new).collect();
        let config = PolicyConfig {
            n_cards: rng.random_range(1..=candidates.len()),
            delta_interval_seconds: interval,
            ..Default::default()
        };
        let picked = schedule_delta(&model, &view, &candidates, now, &config).unwrap();
        if !picked.iter().any(|d| d.card_id.as_str() == "zz") {
            max_scheduled = false;
        }
    }
    check(
        worst <= 1e-12 && zero_ok && max_scheduled,
        format!("1000 instances: max |delta - direct| = {worst:.1e}; zero identity {zero_ok}; p=0 max-score card always scheduled {max_scheduled}"),
    )
}

// Learning on the synthetic corpus.

struct Trained {
    data: SyntheticData,
    log: StudyLog,
    split: usize,
    full: TrainedNet,
    full_report: EvalReport,
    took: Duration,
}

fn train_and_eval(data: &SyntheticData, log: &StudyLog, split: usize, config: NetConfig) -> (TrainedNet, EvalReport) {
    let trained = train(&data.embeddings, log.records(), log.stats(), split, &config, &TrainConfig::default()).expect("training");
    let report = trained.net.evaluate(&data.embeddings, log, split).expect("evaluation");
    (trained, report)
}

fn fmt(x: Option<f64>) -> String {
    x.map_or("n/a".into(), |v| format!("{v:.4}"))
}

fn train_synthetic() -> Trained {
    let started = Instant::now();
    let data = generate(&SyntheticSpec::default(), 50, 2000, 50_000);
    let log = StudyLog::new(data.records.clone()).unwrap();
    let split = log.default_split();
    let (full, full_report) = train_and_eval(&data, &log, split, NetConfig::default());
    Trained {
        data,
        log,
        split,
        full,
        full_report,
        took: started.elapsed(),
    }
}

fn end_to_end(t: &Trained) -> Verdict {
    let r = &t.full_report;
    let (seen, unseen) = (r.seen.auc.unwrap_or(0.0), r.unseen.auc.unwrap_or(0.0));
    let (es, eu) = (r.seen.ece.unwrap_or(1.0), r.unseen.ece.unwrap_or(1.0));
    let ok = seen >= 0.75 && unseen >= 0.70 && es <= 0.15 && eu <= 0.15 && t.took <= Duration::from_secs(600);
    check(
        ok,
        format!(
            "seen AUC {seen:.4}, unseen AUC {unseen:.4}, ECE seen {es:.4} / unseen {eu:.4}; generate+train+eval {:.1?}",
            t.took
        ),
    )
}

fn ablations(t: &Trained) -> Verdict {
    let no_emb = NetConfig {
        use_embeddings: false,
        ..Default::default()
    };
    let k0 = NetConfig {
        retrieval: RetrievalMode::None,
        ..Default::default()
    };
    let (_, r_no) = train_and_eval(&t.data, &t.log, t.split, no_emb);
    let (_, r_k0) = train_and_eval(&t.data, &t.log, t.split, k0);
    let full = t.full_report.unseen.auc.unwrap_or(0.0);
    let (no, zero) = (r_no.unseen.auc.unwrap_or(1.0), r_k0.unseen.auc.unwrap_or(1.0));
    check(
        full - no >= 0.03 && full >= zero - 0.01,
        format!(
            "unseen AUC full (k=5) {full:.4}, no embeddings {no:.4} (drop {:.4}), k=0 {zero:.4} (k5 - k0 = {:+.4}); seen AUC {} / {} / {}",
            full - no,
            full - zero,
            fmt(t.full_report.seen.auc),
            fmt(r_no.seen.auc),
            fmt(r_k0.seen.auc)
        ),
    )
}

fn bootstrap_lower(diffs: &[f64], rng: &mut ChaCha8Rng) -> f64 {
    let mut means: Vec<f64> = (0..5000)
        .map(|_| (0..diffs.len()).map(|_| diffs[rng.random_range(0..diffs.len())]).sum::<f64>() / diffs.len() as f64)
        .collect();
    means.sort_by(f64::total_cmp);
    means[(0.025 * means.len() as f64) as usize]
}

fn semantic_transfer(t: &Trained) -> Verdict {
    let model = ContentAwareModel::new(t.full.net.clone(), Arc::new(t.data.embeddings.clone())).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(59);
    let mut users: Vec<_> = t.log.users().cloned().collect();
    users.sort();
    let mut by_cluster: Vec<Vec<&CardId>> = vec![Vec::new(); t.data.clusters.iter().max().unwrap() + 1];
    for (id, &c) in t.data.card_ids.iter().zip(&t.data.clusters) {
        by_cluster[c].push(id);
    }
    let mut diffs = Vec::new();
    while diffs.len() < 100 {
        let user = &users[rng.random_range(0..users.len())];
        let history = t.log.history(user.as_str()).unwrap();
        let cluster = &by_cluster[rng.random_range(0..by_cluster.len())];
        let a = cluster[rng.random_range(0..cluster.len())];
        let b = cluster[rng.random_range(0..cluster.len())];
        if a == b || history.seen(a.as_str()) || history.seen(b.as_str()) {
            continue;
        }
        let at = history.last_timestamp().unwrap().plus_seconds(3600);
        let query = at.plus_seconds(60);
        let view = StudentView::new(history, t.log.stats());
        let before = model.predict(&view, b.as_str(), query).unwrap().probability;
        let study = StudyRecord::new(user.clone(), a.clone(), at, true);
        let after = model.predict(&view.with_extra(&study), b.as_str(), query).unwrap().probability;
        diffs.push(after - before);
    }
    let mean = diffs.iter().sum::<f64>() / diffs.len() as f64;
    let lower = bootstrap_lower(&diffs, &mut rng);
    let raised = diffs.iter().filter(|d| **d > 0.0).count();
    check(
        lower > 0.0,
        format!("100 same-cluster unseen pairs: mean increase {mean:.5}, bootstrap 2.5th percentile {lower:.5}, {raised}/100 raised"),
    )
}

fn forgetting_curves(t: &Trained) -> Verdict {
    let examples = hlr_examples(&t.log.records()[..t.split]);
    let hlr = HlrModel {
        weights: hlr_fit(&examples, &HlrFitConfig::default()).unwrap().weights,
    };
    let content = ContentAwareModel::new(t.full.net.clone(), Arc::new(t.data.embeddings.clone())).unwrap();
    let models: [&dyn StudentModel; 2] = [&hlr, &content];
    let mut rng = ChaCha8Rng::seed_from_u64(71);
    let mut worst_hlr: f64 = 0.0;
    let mut worst_day0: f64 = 0.0;
    let mut curves = 0;
    for r in t.log.records()[t.split..].choose_multiple(&mut rng, 40) {
        // A curve assumes no studies after `start`, so the view holds only earlier records.
        let start = r.timestamp;
        let mut history = StudyHistory::new(r.user_id.clone());
        for x in t.log.history(r.user_id.as_str()).unwrap().before(start) {
            history.push(x.clone()).unwrap();
        }
        let earlier = t.log.records().partition_point(|x| x.timestamp < start);
        let stats = CardStats::from_records(&t.log.records()[..earlier]);
        let view = StudentView::new(&history, &stats);
        for m in models {
            let curve = forgetting_curve(m, &view, r.card_id.as_str(), start).unwrap();
            if curve.points.len() != 21 || curve.points.last().unwrap().day != CURVE_DAYS {
                return Verdict::Fail(format!("curve has {} points", curve.points.len()));
            }
            let live = m.predict(&view, r.card_id.as_str(), start).unwrap().probability;
            worst_day0 = worst_day0.max((curve.points[0].probability - live).abs());
            curves += 1;
        }
        let prior: Vec<&StudyRecord> = history.records().iter().filter(|x| x.card_id == r.card_id).collect();
        let curve = forgetting_curve(&hlr, &view, r.card_id.as_str(), start).unwrap();
        for p in &curve.points {
            let expected = match prior.last() {
                None => 0.0,
                Some(last) => {
                    let nc = prior.iter().filter(|x| x.is_correct()).count() as f64;
                    let ni = prior.len() as f64 - nc;
                    let hours = (start.seconds() + p.day as i64 * 86_400 - last.timestamp.seconds()) as f64 / 3600.0;
                    2f64.powf(-hours / half_life_hours(&hlr.weights, nc, ni))
                }
            };
            worst_hlr = worst_hlr.max((p.probability - expected).abs());
        }
    }
    check(
        worst_day0 == 0.0 && worst_hlr <= 1e-9,
        format!("{curves} curves of 21 points; max |day0 - live| = {worst_day0:.1e}; max |HLR - 2^(-t/h)| = {worst_hlr:.1e}"),
    )
}

// Service durability and the test-mode phase machine.

fn service_durability() -> Verdict {
    use recall_service::{Engine, RecordRequest};
    let dir = tempfile::tempdir().unwrap();
    let log = dir.path().join("events.jsonl");
    let mut rng = ChaCha8Rng::seed_from_u64(83);
    let t0 = 1_700_000_000;
    let (digest, records) = {
        let e = common::engine(&log);
        let mut clocks = [t0; 8];
        for u in 0..8 {
            e.create_user(&format!("user{u}"), Timestamp(t0)).unwrap();
        }
        for i in 0..1000 {
            let u = rng.random_range(0..8);
            clocks[u] += rng.random_range(0..7200);
            let mut r = RecordRequest::new(format!("user{u}").as_str(), format!("c{:02}", rng.random_range(0..40)), rng.random_bool(0.6));
            r.timestamp = Some(Timestamp(clocks[u]));
            r.elapsed_ms = rng.random_range(300..12_000);
            r.idempotency_key = Some(format!("k{i}"));
            e.record(&r, Timestamp(clocks[u])).unwrap();
        }
        let records: Vec<_> = (0..8).map(|u| e.history(&format!("user{u}")).unwrap()).collect();
        (e.digest(), records)
    };
    let reopened = Engine::open(common::corpus(), Arc::new(LeitnerModel), &log, common::options()).unwrap();
    let same_histories = (0..8).all(|u| reopened.history(&format!("user{u}")).unwrap() == records[u]);
    let total: usize = records.iter().map(Vec::len).sum();
    check(
        reopened.digest() == digest && same_histories && total == 1000,
        format!("{total} records replayed; state digest equal {}", reopened.digest() == digest),
    )
}

fn service_phase_machine() -> Verdict {
    let rt = tokio::runtime::Builder::new_multi_thread().worker_threads(2).enable_all().build().unwrap();
    rt.block_on(async {
        let dir = tempfile::tempdir().unwrap();
        let engine = Arc::new(common::engine(&dir.path().join("events.jsonl")));
        let client = common::Client::new(engine, true);
        let t0 = 1_700_000_000;
        let scripted = common::scripted_run(&client, "scripted", t0, |i| (i % 5 != 2, 3000 + 500 * (i as u64 % 4))).await;
        let perfect = common::scripted_run(&client, "perfect", t0, |_| (true, 5000)).await;
        let f = |r: &serde_json::Value, k: &str| r[k].as_f64().unwrap();
        // Hand computation: 16 of 20 correct; times cycle 3.0, 3.5, 4.0, 4.5 s.
        let acc = 16.0 / 20.0;
        let mean_all = (3.0 + 3.5 + 4.0 + 4.5) / 4.0;
        let ttp_formula = 20.0 * f(&scripted, "posttest_accuracy") / f(&scripted, "mean_response_all");
        let ok = f(&scripted, "posttest_accuracy") == acc
            && f(&scripted, "pretest_accuracy") == 0.75
            && (f(&scripted, "mean_response_all") - mean_all).abs() < 1e-12
            && f(&scripted, "ttp") == ttp_formula
            && (f(&scripted, "ttp") - 20.0 * acc / mean_all).abs() < 1e-12
            && f(&perfect, "ttp") == 4.0;
        check(
            ok,
            format!(
                "scripted TTP {} (20*{}/{}), all-correct at 5 s TTP {}",
                f(&scripted, "ttp"),
                f(&scripted, "posttest_accuracy"),
                f(&scripted, "mean_response_all"),
                f(&perfect, "ttp")
            ),
        )
    })
}

// Released-dataset reproduction, run only when the data is present.

fn released_dataset() -> Verdict {
    let (Ok(data_path), Ok(emb_path)) = (std::env::var("RECALL_DATASET"), std::env::var("RECALL_EMBEDDINGS")) else {
        return Verdict::Skip("set RECALL_DATASET and RECALL_EMBEDDINGS to run".into());
    };
    let rows = match load_dataset(&data_path) {
        Ok(r) => r,
        Err(e) => return Verdict::Fail(format!("{data_path}: {e}")),
    };
    let store = match EmbeddingStore::load(&emb_path) {
        Ok(s) => s,
        Err(e) => return Verdict::Fail(format!("{emb_path}: {e}")),
    };
    let log = build_histories(&rows).unwrap();
    let split = log.default_split();
    let trained = train(&store, log.records(), log.stats(), split, &NetConfig::default(), &TrainConfig::default()).unwrap();
    let r = trained.net.evaluate(&store, &log, split).unwrap();
    let leitner_rows = score_records(&LeitnerModel, &log, split..log.len()).unwrap();
    let (s, l): (Vec<f64>, Vec<bool>) = leitner_rows.iter().map(|x| (x.score, x.label)).unzip();
    let base = auc(&s, &l).unwrap_or(0.5);
    let (seen, unseen) = (r.seen.auc.unwrap_or(0.0), r.unseen.auc.unwrap_or(0.0));
    check(
        seen > unseen && unseen > base,
        format!("seen AUC {seen:.4} > unseen AUC {unseen:.4} > Leitner AUC {base:.4}"),
    )
}

fn main() {
    let mut suite = Suite { failures: 0 };
    suite.run("metric oracles", metric_oracles);
    suite.run("gradient check", gradient_check);
    suite.run("retrieval exactness", retrieval_exactness);
    suite.run("feature replay (synthetic oracle)", feature_replay_synthetic);
    suite.run("feature replay (released dataset)", feature_replay_released);
    suite.run("delta policy algebra", delta_algebra);

    let trained = catch_unwind(train_synthetic);
    match &trained {
        Ok(t) => {
            suite.run("end-to-end learning", || end_to_end(t));
            suite.run("ablation direction", || ablations(t));
            suite.run("semantic transfer", || semantic_transfer(t));
            suite.run("forgetting curves", || forgetting_curves(t));
        }
        Err(_) => {
            for name in ["end-to-end learning", "ablation direction", "semantic transfer", "forgetting curves"] {
                suite.run(name, || Verdict::Fail("training on the synthetic corpus panicked".into()));
            }
        }
    }

    suite.run("service durability", service_durability);
    suite.run("service phase machine", service_phase_machine);
    suite.run("released-dataset reproduction", released_dataset);

    if suite.failures > 0 {
        println!("{} criteria failed", suite.failures);
        std::process::exit(1);
    }
}
