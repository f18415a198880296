//! Input layout: `[card embedding | card features | k x (embedding | features | last response)]`.

use serde::{Deserialize, Serialize};

use crate::model::ModelError;

/// Widths of one assembled input row. `embed_dim` is 0 when embeddings are left out.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputLayout {
    pub embed_dim: usize,
    pub num_features: usize,
    pub k: usize,
}

impl InputLayout {
    pub fn block_width(&self) -> usize {
        self.embed_dim + self.num_features + 1
    }

    pub fn width(&self) -> usize {
        self.embed_dim + self.num_features + self.k * self.block_width()
    }
}

/// One retrieved card as seen by the network.
#[derive(Debug, Clone, Copy)]
pub struct RetrievedBlock<'a> {
    pub embedding: &'a [f32],
    pub features: &'a [f64],
    pub last_response: f64,
}

fn check(expected: usize, found: usize) -> Result<(), ModelError> {
    if expected == found {
        Ok(())
    } else {
        Err(ModelError::DimensionMismatch { expected, found })
    }
}

fn write_part(out: &mut [f64], at: &mut usize, embedding: &[f32], features: &[f64]) {
    for (o, e) in out[*at..].iter_mut().zip(embedding) {
        *o = *e as f64;
    }
    *at += embedding.len();
    out[*at..*at + features.len()].copy_from_slice(features);
    *at += features.len();
}

/// Writes one row into `out` (length `layout.width()`). Blocks keep the order
/// given; slots past `retrieved.len()` are zero.
pub fn assemble_into(
    layout: &InputLayout,
    card_embedding: &[f32],
    card_features: &[f64],
    retrieved: &[RetrievedBlock<'_>],
    out: &mut [f64],
) -> Result<(), ModelError> {
    check(layout.width(), out.len())?;
    check(layout.embed_dim, card_embedding.len())?;
    check(layout.num_features, card_features.len())?;
    if retrieved.len() > layout.k {
        return Err(ModelError::DimensionMismatch {
            expected: layout.k,
            found: retrieved.len(),
        });
    }
    let mut at = 0;
    write_part(out, &mut at, card_embedding, card_features);
    for block in retrieved {
        check(layout.embed_dim, block.embedding.len())?;
        check(layout.num_features, block.features.len())?;
        write_part(out, &mut at, block.embedding, block.features);
        out[at] = block.last_response;
        at += 1;
    }
    out[at..].fill(0.0);
    Ok(())
}

pub fn assemble(layout: &InputLayout, card_embedding: &[f32], card_features: &[f64], retrieved: &[RetrievedBlock<'_>]) -> Result<Vec<f64>, ModelError> {
    let mut out = vec![0.0; layout.width()];
    assemble_into(layout, card_embedding, card_features, retrieved, &mut out)?;
    Ok(out)
}
