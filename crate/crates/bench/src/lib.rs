//! Seeded fixtures shared by the benchmarks.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use recall_core::classifier::NetworkParams;
use recall_core::eval::{generate, SyntheticSpec};
use recall_core::ingestion::DatasetRow;
use recall_core::retrieval::{EmbeddingStore, EmbeddingVector};
use recall_core::CardId;

/// `n` uniform random vectors with ids `e00000`, `e00001`, ...
pub fn random_store(n: usize, dim: usize, seed: u64) -> (EmbeddingStore, Vec<CardId>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = EmbeddingStore::new(dim);
    let ids: Vec<CardId> = (0..n).map(|i| CardId::new(format!("e{i:05}"))).collect();
    for id in &ids {
        let values = (0..dim).map(|_| rng.random_range(-1.0f32..1.0)).collect();
        store.insert(EmbeddingVector { card_id: id.clone(), values }).expect("fresh id");
    }
    (store, ids)
}

pub fn random_query(dim: usize, seed: u64) -> Vec<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..dim).map(|_| rng.random_range(-1.0f32..1.0)).collect()
}

/// Initialized network and a standard-normal input batch.
pub fn random_net(input: usize, hidden: usize, batch: usize, seed: u64) -> (NetworkParams, Array2<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = NetworkParams::init(input, hidden, &mut rng);
    let x = Array2::from_shape_fn((batch, input), |_| rng.random_range(-2.0..2.0));
    (params, x)
}

/// About `n` synthetic study rows in file order.
pub fn synthetic_rows(n: usize) -> Vec<DatasetRow> {
    let data = generate(&SyntheticSpec::default(), 20, 400, n);
    data.records
        .iter()
        .map(|r| DatasetRow::new(r.user_id.clone(), r.card_id.clone(), r.timestamp, r.is_correct()))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fixtures_have_requested_shapes() {
        let (store, ids) = random_store(50, 8, 1);
        assert_eq!((store.len(), store.dim(), ids.len()), (50, 8, 50));
        let (params, x) = random_net(10, 4, 3, 1);
        assert_eq!(params.num_params(), 4 * 10 + 4 * 4 + 1);
        assert_eq!(x.dim(), (3, 10));
        assert!(!synthetic_rows(500).is_empty());
    }
}
