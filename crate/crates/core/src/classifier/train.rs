use std::collections::HashMap;
use std::ops::Range;

use ndarray::{s, Array2, ArrayView2};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::network::{self, Adam, DropoutMasks, NetworkParams};
use super::{card_context, CardContext, NetConfig, RecallNet, TrainConfig};
use crate::domain::{StudyRecord, Timestamp, UserId};
use crate::features::{CardStats, FeatureContext, FeatureError, NormalizationStats, UserReplay};
use crate::model::ModelError;
use crate::retrieval::EmbeddingStore;

/// Indexed training rows for [`fit_network`].
pub trait RowSource {
    fn len(&self) -> usize;
    fn width(&self) -> usize;
    fn fill(&self, index: usize, out: &mut [f64]) -> Result<(), ModelError>;
    fn label(&self, index: usize) -> f64;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Rows of a dense matrix.
pub struct MatrixRows<'a> {
    pub x: ArrayView2<'a, f64>,
    pub labels: &'a [f64],
}

impl RowSource for MatrixRows<'_> {
    fn len(&self) -> usize {
        self.labels.len()
    }

    fn width(&self) -> usize {
        self.x.ncols()
    }

    fn fill(&self, index: usize, out: &mut [f64]) -> Result<(), ModelError> {
        for (o, v) in out.iter_mut().zip(self.x.row(index)) {
            *o = *v;
        }
        Ok(())
    }

    fn label(&self, index: usize) -> f64 {
        self.labels[index]
    }
}

/// Mini-batch Adam on mean binary cross-entropy.
///
/// Returns the parameters (rounded to f32 precision) and the mean train-mode
/// loss of every epoch.
pub fn fit_network(source: &impl RowSource, hidden: usize, config: &TrainConfig) -> Result<(NetworkParams, Vec<f64>), ModelError> {
    if source.is_empty() {
        return Err(FeatureError::EmptySplit.into());
    }
    let width = source.width();
    let batch_size = config.batch_size.max(1);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut params = NetworkParams::init(width, hidden, &mut rng);
    let mut adam = Adam::new(&params, config.learning_rate, config.beta1, config.beta2, config.epsilon);
    let mut order: Vec<usize> = (0..source.len()).collect();
    let mut x = Array2::zeros((batch_size, width));
    let mut labels = Vec::with_capacity(batch_size);
    let mut losses = Vec::with_capacity(config.epochs);

    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(batch_size) {
            labels.clear();
            for (row, &i) in chunk.iter().enumerate() {
                source.fill(i, x.row_mut(row).as_slice_mut().expect("standard layout"))?;
                labels.push(source.label(i));
            }
            let xb = x.slice(s![..chunk.len(), ..]);
            let masks = DropoutMasks::sample(&mut rng, chunk.len(), width, hidden, config.dropout);
            let cache = network::forward_batch(&params, xb, masks.as_ref())?;
            total += network::batch_loss(&cache, &labels) * chunk.len() as f64;
            let grads = network::backward(&params, &cache, &labels);
            adam.step(&mut params, &grads);
        }
        let loss = total / source.len() as f64;
        if !loss.is_finite() || !params.is_finite() {
            return Err(ModelError::NonfiniteActivation("training loss"));
        }
        log::debug!("epoch {} loss {loss:.6}", epoch + 1);
        losses.push(loss);
    }
    params.round_to_f32();
    Ok((params, losses))
}

/// A study record turned into network context, with its outcome.
#[derive(Debug, Clone)]
pub struct LabeledContext {
    pub user_id: UserId,
    pub timestamp: Timestamp,
    pub context: CardContext,
    pub label: f64,
    /// Whether the user had studied the card before this record.
    pub seen: bool,
}

/// Contexts for `records[range]`, each computed from the strictly earlier
/// part of its user's log. `records` must be in chronological order.
pub fn build_contexts(
    store: &EmbeddingStore,
    records: &[StudyRecord],
    stats: &CardStats,
    config: &NetConfig,
    range: Range<usize>,
) -> Result<Vec<LabeledContext>, ModelError> {
    if let Some(i) = records.windows(2).position(|w| w[1].timestamp < w[0].timestamp) {
        return Err(ModelError::UnsortedLog { index: i + 1 });
    }
    struct UserState {
        replay: UserReplay,
        applied: usize,
        indices: Vec<usize>,
    }
    let ctx = FeatureContext::new(stats);
    let mut users: HashMap<&str, UserState> = HashMap::new();
    let mut out = Vec::with_capacity(range.len());
    for (i, r) in records.iter().enumerate().take(range.end) {
        let state = users.entry(r.user_id.as_str()).or_insert_with(|| UserState {
            replay: UserReplay::new(),
            applied: 0,
            indices: Vec::new(),
        });
        while let Some(&j) = state.indices.get(state.applied) {
            if records[j].timestamp >= r.timestamp {
                break;
            }
            state.replay.apply(&records[j]);
            state.applied += 1;
        }
        if range.contains(&i) {
            out.push(LabeledContext {
                user_id: r.user_id.clone(),
                timestamp: r.timestamp,
                context: card_context(store, &state.replay, &ctx, r.card_id.as_str(), r.timestamp, config)?,
                label: r.response.as_f64(),
                seen: state.replay.card(r.card_id.as_str()).is_some(),
            });
        }
        state.indices.push(i);
    }
    Ok(out)
}

struct ContextRows<'a> {
    net: &'a RecallNet,
    store: &'a EmbeddingStore,
    contexts: &'a [LabeledContext],
}

impl RowSource for ContextRows<'_> {
    fn len(&self) -> usize {
        self.contexts.len()
    }

    fn width(&self) -> usize {
        self.net.layout.width()
    }

    fn fill(&self, index: usize, out: &mut [f64]) -> Result<(), ModelError> {
        self.net.fill_row(self.store, &self.contexts[index].context, out)
    }

    fn label(&self, index: usize) -> f64 {
        self.contexts[index].label
    }
}

#[derive(Debug, Clone)]
pub struct TrainedNet {
    pub net: RecallNet,
    pub epoch_losses: Vec<f64>,
}

/// Trains on `records[..split_at]`, normalizing features with statistics of
/// that split.
pub fn train(
    store: &EmbeddingStore,
    records: &[StudyRecord],
    stats: &CardStats,
    split_at: usize,
    config: &NetConfig,
    train_config: &TrainConfig,
) -> Result<TrainedNet, ModelError> {
    let contexts = build_contexts(store, records, stats, config, 0..split_at.min(records.len()))?;
    train_on_contexts(store, &contexts, config, train_config)
}

pub(crate) fn train_on_contexts(
    store: &EmbeddingStore,
    contexts: &[LabeledContext],
    config: &NetConfig,
    train_config: &TrainConfig,
) -> Result<TrainedNet, ModelError> {
    let norm = NormalizationStats::fit(contexts.iter().map(|c| &c.context.features))?;
    let layout = config.layout(store.dim());
    let mut net = RecallNet {
        config: config.clone(),
        train_config: *train_config,
        layout,
        norm,
        params: NetworkParams::zeros(layout.width(), config.hidden),
    };
    let rows = ContextRows { net: &net, store, contexts };
    let (params, epoch_losses) = fit_network(&rows, config.hidden, train_config)?;
    net.params = params;
    Ok(TrainedNet { net, epoch_losses })
}
