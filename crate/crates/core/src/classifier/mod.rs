//! Content-aware recall classifier: retrieves related history cards by
//! embedding similarity, assembles their features with the current card's,
//! and scores the result with a small feed-forward network.

mod assemble;
mod checkpoint;
pub mod network;
mod train;

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use ndarray::{s, Array2};
use serde::{Deserialize, Serialize};

use crate::dataset::StudyLog;
use crate::domain::{CardId, Timestamp};
use crate::eval::{EvalReport, ScoredRow};
use crate::features::{FeatureContext, FeatureMask, FeatureVector, NormalizationStats, UserReplay};
use crate::model::{ModelError, RecallPrediction, StudentModel, StudentView};
use crate::retrieval::{past_k_replay, retrieve_topk_replay, EmbeddingStore, RetrievedSet, DEFAULT_K};

pub use assemble::{assemble, assemble_into, InputLayout, RetrievedBlock};
pub use checkpoint::CheckpointError;
pub use network::{NetworkParams, DEFAULT_HIDDEN};
pub use train::{build_contexts, fit_network, train, LabeledContext, MatrixRows, RowSource, TrainedNet};

/// How history cards are chosen for the retrieved blocks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RetrievalMode {
    /// Most similar studied cards by embedding inner product.
    TopK,
    /// Most recently studied cards.
    PastK,
    None,
}

impl fmt::Display for RetrievalMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::TopK => "top-k",
            Self::PastK => "past-k",
            Self::None => "none",
        })
    }
}

impl FromStr for RetrievalMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "top-k" | "topk" => Ok(Self::TopK),
            "past-k" | "pastk" => Ok(Self::PastK),
            "none" => Ok(Self::None),
            other => Err(format!("unknown retrieval mode {other:?}")),
        }
    }
}

/// Architecture and input options.
#[derive(Debug, Clone, PartialEq)]
pub struct NetConfig {
    pub hidden: usize,
    pub k: usize,
    pub retrieval: RetrievalMode,
    /// When false, embeddings are left out of the input (retrieval still uses them).
    pub use_embeddings: bool,
    pub mask: FeatureMask,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            hidden: DEFAULT_HIDDEN,
            k: DEFAULT_K,
            retrieval: RetrievalMode::TopK,
            use_embeddings: true,
            mask: FeatureMask::default(),
        }
    }
}

impl NetConfig {
    pub fn effective_k(&self) -> usize {
        match self.retrieval {
            RetrievalMode::None => 0,
            _ => self.k,
        }
    }

    pub fn layout(&self, embed_dim: usize) -> InputLayout {
        InputLayout {
            embed_dim: if self.use_embeddings { embed_dim } else { 0 },
            num_features: self.mask.count(),
            k: self.effective_k(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub dropout: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 5e-5,
            batch_size: 64,
            epochs: 10,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            dropout: 0.1,
            seed: 0,
        }
    }
}

/// A retrieved history card with its raw features at query time.
#[derive(Debug, Clone, PartialEq)]
pub struct RetrievedContext {
    pub card_id: CardId,
    pub score: f64,
    pub features: FeatureVector,
    pub last_response: f64,
}

/// Everything the network sees for one (user, card, instant), before normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct CardContext {
    pub card_id: CardId,
    pub features: FeatureVector,
    pub retrieved: Vec<RetrievedContext>,
}

/// Retrieval step of the pipeline.
pub fn retrieve(store: &EmbeddingStore, replay: &UserReplay, card: &str, mode: RetrievalMode, k: usize) -> Result<RetrievedSet, ModelError> {
    Ok(match mode {
        RetrievalMode::TopK => retrieve_topk_replay(store, replay, card, k)?,
        RetrievalMode::PastK => past_k_replay(replay, k),
        RetrievalMode::None => RetrievedSet::default(),
    })
}

/// Retrieval and feature extraction for `card` at `now`.
pub fn card_context(
    store: &EmbeddingStore,
    replay: &UserReplay,
    ctx: &FeatureContext<'_>,
    card: &str,
    now: Timestamp,
    config: &NetConfig,
) -> Result<CardContext, ModelError> {
    store.require(card)?;
    let retrieved = retrieve(store, replay, card, config.retrieval, config.effective_k())?
        .entries
        .into_iter()
        .map(|e| {
            let last_response = replay.card(e.card_id.as_str()).map_or(0.0, |s| if s.last_correct { 1.0 } else { 0.0 });
            RetrievedContext {
                features: replay.features(e.card_id.as_str(), now, ctx),
                card_id: e.card_id,
                score: e.score,
                last_response,
            }
        })
        .collect();
    Ok(CardContext {
        card_id: CardId::new(card),
        features: replay.features(card, now, ctx),
        retrieved,
    })
}

/// A trained network with the preprocessing it was trained under.
#[derive(Debug, Clone, PartialEq)]
pub struct RecallNet {
    pub config: NetConfig,
    pub train_config: TrainConfig,
    pub layout: InputLayout,
    pub norm: NormalizationStats,
    pub params: NetworkParams,
}

impl RecallNet {
    /// Normalizes and assembles `context` into `out`.
    pub fn fill_row(&self, store: &EmbeddingStore, context: &CardContext, out: &mut [f64]) -> Result<(), ModelError> {
        let embedding = |id: &CardId| -> Result<&[f32], ModelError> {
            if self.config.use_embeddings {
                Ok(store.require(id.as_str())?)
            } else {
                Ok(&[])
            }
        };
        let card_features = self.norm.normalize(&context.features, &self.config.mask)?;
        let retrieved_features = context
            .retrieved
            .iter()
            .map(|r| self.norm.normalize(&r.features, &self.config.mask))
            .collect::<Result<Vec<_>, _>>()?;
        let blocks = context
            .retrieved
            .iter()
            .zip(&retrieved_features)
            .map(|(r, f)| {
                Ok(RetrievedBlock {
                    embedding: embedding(&r.card_id)?,
                    features: f,
                    last_response: r.last_response,
                })
            })
            .collect::<Result<Vec<_>, ModelError>>()?;
        assemble_into(&self.layout, embedding(&context.card_id)?, &card_features, &blocks, out)
    }

    pub fn row(&self, store: &EmbeddingStore, context: &CardContext) -> Result<Vec<f64>, ModelError> {
        let mut out = vec![0.0; self.layout.width()];
        self.fill_row(store, context, &mut out)?;
        Ok(out)
    }

    pub fn predict_context(&self, store: &EmbeddingStore, context: &CardContext) -> Result<f64, ModelError> {
        network::forward(&self.params, &self.row(store, context)?)
    }

    /// Eval-mode probabilities for many contexts, in batches.
    pub fn predict_contexts<'a>(&self, store: &EmbeddingStore, contexts: impl ExactSizeIterator<Item = &'a CardContext>) -> Result<Vec<f64>, ModelError> {
        const CHUNK: usize = 256;
        let width = self.layout.width();
        let mut out = Vec::with_capacity(contexts.len());
        let mut x = Array2::zeros((CHUNK, width));
        let mut filled = 0;
        let flush = |x: &Array2<f64>, n: usize, out: &mut Vec<f64>| -> Result<(), ModelError> {
            let cache = network::forward_batch(&self.params, x.slice(s![..n, ..]), None)?;
            out.extend(cache.probabilities.iter());
            Ok(())
        };
        for c in contexts {
            self.fill_row(store, c, x.row_mut(filled).as_slice_mut().expect("standard layout"))?;
            filled += 1;
            if filled == CHUNK {
                flush(&x, filled, &mut out)?;
                filled = 0;
            }
        }
        if filled > 0 {
            flush(&x, filled, &mut out)?;
        }
        Ok(out)
    }

    /// Same result as [`evaluate`](crate::eval::evaluate) on a [`ContentAwareModel`],
    /// computed with one incremental pass over the log.
    pub fn evaluate(&self, store: &EmbeddingStore, log: &StudyLog, split: usize) -> Result<EvalReport, ModelError> {
        let contexts = build_contexts(store, log.records(), log.stats(), &self.config, split.min(log.len())..log.len())?;
        let scores = self.predict_contexts(store, contexts.iter().map(|c| &c.context))?;
        let rows: Vec<ScoredRow> = contexts
            .iter()
            .zip(scores)
            .map(|(c, score)| ScoredRow {
                score,
                label: c.label == 1.0,
                seen: c.seen,
            })
            .collect();
        Ok(EvalReport::from_rows(self.tag(), &rows))
    }

    pub fn tag(&self) -> String {
        let mut tag = String::from("recall-net");
        if !self.config.use_embeddings {
            tag.push_str("/no-embeddings");
        }
        match self.config.retrieval {
            RetrievalMode::TopK => tag.push_str(&format!("/top-{}", self.config.k)),
            RetrievalMode::PastK => tag.push_str(&format!("/past-{}", self.config.k)),
            RetrievalMode::None => tag.push_str("/no-retrieval"),
        }
        tag
    }
}

/// [`RecallNet`] bound to an embedding store, usable as a student model.
#[derive(Debug, Clone)]
pub struct ContentAwareModel {
    pub net: Arc<RecallNet>,
    pub store: Arc<EmbeddingStore>,
    tag: String,
}

impl ContentAwareModel {
    pub fn new(net: impl Into<Arc<RecallNet>>, store: Arc<EmbeddingStore>) -> Result<Self, ModelError> {
        let net = net.into();
        if net.config.use_embeddings && net.layout.embed_dim != store.dim() {
            return Err(ModelError::DimensionMismatch {
                expected: net.layout.embed_dim,
                found: store.dim(),
            });
        }
        let tag = net.tag();
        Ok(Self { net, store, tag })
    }

    pub fn context(&self, view: &StudentView<'_>, card: &str, now: Timestamp) -> Result<CardContext, ModelError> {
        let replay = view.replay(now);
        card_context(&self.store, &replay, &view.feature_context(), card, now, &self.net.config)
    }
}

impl StudentModel for ContentAwareModel {
    fn tag(&self) -> &str {
        &self.tag
    }

    fn predict(&self, view: &StudentView<'_>, card: &str, now: Timestamp) -> Result<RecallPrediction, ModelError> {
        let context = self.context(view, card, now)?;
        let p = self.net.predict_context(&self.store, &context)?;
        Ok(RecallPrediction::new(p, self.tag.as_str()))
    }
}
