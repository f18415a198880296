//! Seeded synthetic students: clustered card embeddings and responses drawn
//! from an exponential memory model with cluster-correlated prior knowledge.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal, Normal, StandardNormal};

use crate::domain::{CardId, Corpus, Flashcard, StudyRecord, Timestamp, SECONDS_PER_HOUR};
use crate::retrieval::{EmbeddingStore, EmbeddingVector};

/// 2023-01-01T00:00:00Z
pub const SYNTHETIC_EPOCH: i64 = 1_672_531_200;

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    /// Prior probability of recalling an unstudied card, one per topic cluster.
    pub base_knowledge: Vec<f64>,
    pub embed_dim: usize,
    /// Per-coordinate noise scale added to the unit cluster centroid (divided by sqrt(dim)).
    pub embedding_noise: f64,
    /// Weight of the card's difficulty along a shared embedding direction.
    pub difficulty_signal: f64,
    /// Standard deviations of logit offsets.
    pub card_offset_std: f64,
    pub user_offset_std: f64,
    pub user_cluster_offset_std: f64,
    /// Median and log-space spread of the initial memory half-life.
    pub half_life_hours: f64,
    pub half_life_spread: f64,
    /// Half-life multiplier increment after each correct study.
    pub learning_increment: f64,
    /// Probability that a study step reviews a known card instead of a new one.
    pub review_fraction: f64,
    pub days: u32,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            base_knowledge: vec![0.1, 0.3, 0.5, 0.7, 0.9],
            embed_dim: 32,
            embedding_noise: 0.3,
            difficulty_signal: 0.8,
            card_offset_std: 2.0,
            user_offset_std: 0.5,
            user_cluster_offset_std: 1.2,
            half_life_hours: 6.0,
            half_life_spread: 0.5,
            learning_increment: 1.5,
            review_fraction: 0.75,
            days: 30,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn num_clusters(&self) -> usize {
        self.base_knowledge.len()
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticData {
    pub corpus: Corpus,
    /// Chronological.
    pub records: Vec<StudyRecord>,
    pub embeddings: EmbeddingStore,
    pub card_ids: Vec<CardId>,
    /// Topic cluster of each card, parallel to `card_ids`.
    pub clusters: Vec<usize>,
}

impl SyntheticData {
    pub fn cluster_of(&self, card: &str) -> Option<usize> {
        self.card_ids.iter().position(|c| c.as_str() == card).map(|i| self.clusters[i])
    }
}

fn logit(p: f64) -> f64 {
    let p = p.clamp(1e-6, 1.0 - 1e-6);
    (p / (1.0 - p)).ln()
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn unit_vector(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    v.into_iter().map(|x| x / norm).collect()
}

struct Memory {
    half_life: f64,
    last: Timestamp,
}

/// Generates `n_cards` cards split evenly over clusters and about `n_records`
/// study records spread across `n_users` users.
pub fn generate(spec: &SyntheticSpec, n_users: usize, n_cards: usize, n_records: usize) -> SyntheticData {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let k = spec.num_clusters().max(1);
    let dim = spec.embed_dim;

    let centroids: Vec<Vec<f64>> = (0..k).map(|_| unit_vector(&mut rng, dim)).collect();
    let difficulty_dir = unit_vector(&mut rng, dim);
    let offset = |rng: &mut ChaCha8Rng, std: f64| if std > 0.0 { Normal::new(0.0, std).unwrap().sample(rng) } else { 0.0 };

    let mut corpus = Corpus::new();
    let mut embeddings = EmbeddingStore::new(dim);
    let mut card_ids = Vec::with_capacity(n_cards);
    let mut clusters = Vec::with_capacity(n_cards);
    let mut card_offsets = Vec::with_capacity(n_cards);
    for i in 0..n_cards {
        let c = i % k;
        let id = CardId::new(format!("card{i:05}"));
        let card_offset = offset(&mut rng, spec.card_offset_std);
        let noise = spec.embedding_noise / (dim as f64).sqrt();
        let values = (0..dim)
            .map(|j| {
                let n: f64 = StandardNormal.sample(&mut rng);
                (centroids[c][j] + noise * n + spec.difficulty_signal * card_offset * difficulty_dir[j]) as f32
            })
            .collect();
        let mut card = Flashcard::new(id.clone(), format!("synthetic card {i} on topic {c}"), format!("topic{c}"));
        card.back_text = format!("answer {i}");
        card.deck_name = format!("Topic {c}");
        corpus.insert(card).expect("generated ids are unique");
        embeddings
            .insert(EmbeddingVector { card_id: id.clone(), values })
            .expect("generated embeddings are finite");
        card_ids.push(id);
        clusters.push(c);
        card_offsets.push(card_offset);
    }

    let half_life = LogNormal::new(spec.half_life_hours.max(1e-3).ln(), spec.half_life_spread.max(0.0)).unwrap();
    let horizon = spec.days.max(1) as i64 * 86_400;
    let mut records = Vec::with_capacity(n_records);
    for u in 0..n_users {
        let user = format!("user{u:03}");
        let budget = n_records / n_users.max(1) + usize::from(u < n_records % n_users.max(1));
        let user_offset = offset(&mut rng, spec.user_offset_std);
        let cluster_offsets: Vec<f64> = (0..k).map(|_| offset(&mut rng, spec.user_cluster_offset_std)).collect();

        let mut sessions = Vec::new();
        let mut planned = 0;
        while planned < budget {
            let len = rng.random_range(10..=30).min(budget - planned);
            sessions.push((rng.random_range(0..horizon), len));
            planned += len;
        }
        sessions.sort_unstable();

        let mut memory: HashMap<usize, Memory> = HashMap::new();
        let mut studied: Vec<usize> = Vec::new();
        let mut t_end = 0i64;
        for (start, len) in sessions {
            let mut t = SYNTHETIC_EPOCH + start.max(t_end);
            for _ in 0..len {
                t += rng.random_range(20..=90);
                let review = !studied.is_empty() && (studied.len() >= n_cards || rng.random_bool(spec.review_fraction));
                let card = if review {
                    studied[rng.random_range(0..studied.len())]
                } else {
                    loop {
                        let c = rng.random_range(0..n_cards);
                        if !memory.contains_key(&c) {
                            break c;
                        }
                    }
                };
                let c = clusters[card];
                let prior = sigmoid(logit(spec.base_knowledge[c]) + user_offset + cluster_offsets[c] + card_offsets[card]);
                let now = Timestamp(t);
                let p = match memory.get(&card) {
                    None => prior,
                    Some(m) => {
                        let dt = now.seconds().saturating_sub(m.last.seconds()) as f64 / SECONDS_PER_HOUR as f64;
                        prior + (1.0 - prior) * 2f64.powf(-dt / m.half_life)
                    }
                };
                let correct = rng.random_bool(p.clamp(0.0, 1.0));
                let m = memory.entry(card).or_insert_with(|| {
                    studied.push(card);
                    Memory {
                        half_life: half_life.sample(&mut rng),
                        last: now,
                    }
                });
                if correct {
                    m.half_life *= 1.0 + spec.learning_increment;
                }
                m.last = now;
                let mut rec = StudyRecord::new(user.as_str(), card_ids[card].clone(), now, correct);
                rec.elapsed_ms = rng.random_range(2_000..12_000);
                rec.deck_id = format!("topic{c}");
                records.push(rec);
            }
            t_end = t - SYNTHETIC_EPOCH;
        }
    }
    records.sort_by_key(|r| r.timestamp);
    SyntheticData {
        corpus,
        records,
        embeddings,
        card_ids,
        clusters,
    }
}
