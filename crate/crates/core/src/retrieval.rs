//! Embedding store and exact maximum-inner-product retrieval over a study history.
//!
//! Vectors are kept in one contiguous `f32` buffer; scores accumulate in `f64`.
//! Two on-disk formats are accepted:
//!
//! * text: header `#dim D`, then `card_id<TAB>v1 v2 ... vD` per line;
//! * binary: magic `EMB1`, little-endian `u32` D, then per record a `u32` id
//!   length, the id bytes, and D little-endian `f32`s.

use std::cmp::Ordering;
use std::collections::{HashMap, HashSet};
use std::io::{self, BufRead, BufReader, Read, Write};
use std::path::Path;

use thiserror::Error;

use crate::domain::{CardId, StudyHistory};
use crate::features::UserReplay;

pub const DEFAULT_K: usize = 5;
pub const BINARY_MAGIC: &[u8; 4] = b"EMB1";

#[derive(Debug, Error)]
pub enum RetrievalError {
    #[error("dimension mismatch: expected {expected}, found {found}{}", line_suffix(*.line))]
    DimensionMismatch { expected: usize, found: usize, line: Option<usize> },
    #[error("duplicate card id {0}")]
    DuplicateCardId(CardId),
    #[error("malformed row at line {line}: {reason}")]
    MalformedRow { line: usize, reason: String },
    #[error("no embedding for card {0}")]
    MissingEmbedding(CardId),
    #[error(transparent)]
    Io(#[from] io::Error),
}

fn line_suffix(line: Option<usize>) -> String {
    line.map(|l| format!(" at line {l}")).unwrap_or_default()
}

/// A dense vector and the card it represents.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingVector {
    pub card_id: CardId,
    pub values: Vec<f32>,
}

/// Immutable-after-load map from card id to a fixed-dimension vector.
#[derive(Debug, Clone)]
pub struct EmbeddingStore {
    dim: usize,
    ids: Vec<CardId>,
    index: HashMap<CardId, usize>,
    data: Vec<f32>,
}

impl EmbeddingStore {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            ids: Vec::new(),
            index: HashMap::new(),
            data: Vec::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn insert(&mut self, v: EmbeddingVector) -> Result<(), RetrievalError> {
        self.insert_at(v, None)
    }

    fn insert_at(&mut self, v: EmbeddingVector, line: Option<usize>) -> Result<(), RetrievalError> {
        if v.values.len() != self.dim {
            return Err(RetrievalError::DimensionMismatch {
                expected: self.dim,
                found: v.values.len(),
                line,
            });
        }
        if let Some(bad) = v.values.iter().position(|x| !x.is_finite()) {
            return Err(RetrievalError::MalformedRow {
                line: line.unwrap_or(0),
                reason: format!("non-finite value at position {bad}"),
            });
        }
        if self.index.contains_key(&v.card_id) {
            return Err(RetrievalError::DuplicateCardId(v.card_id));
        }
        self.index.insert(v.card_id.clone(), self.ids.len());
        self.ids.push(v.card_id);
        self.data.extend_from_slice(&v.values);
        Ok(())
    }

    pub fn get(&self, card: &str) -> Option<&[f32]> {
        self.index.get(card).map(|&i| self.row(i))
    }

    pub fn require(&self, card: &str) -> Result<&[f32], RetrievalError> {
        self.get(card).ok_or_else(|| RetrievalError::MissingEmbedding(CardId::new(card)))
    }

    pub fn contains(&self, card: &str) -> bool {
        self.index.contains_key(card)
    }

    fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&CardId, &[f32])> {
        self.ids.iter().enumerate().map(|(i, id)| (id, self.row(i)))
    }

    /// Reads either format, detected from the leading bytes.
    pub fn load(path: impl AsRef<Path>) -> Result<Self, RetrievalError> {
        let mut reader = BufReader::new(std::fs::File::open(path)?);
        let head = reader.fill_buf()?;
        if head.starts_with(BINARY_MAGIC) {
            Self::read_binary(reader)
        } else {
            Self::read_text(reader)
        }
    }

    pub fn read_text(reader: impl BufRead) -> Result<Self, RetrievalError> {
        let mut lines = reader.lines().enumerate();
        let dim = loop {
            let Some((i, line)) = lines.next() else {
                return Err(RetrievalError::MalformedRow {
                    line: 1,
                    reason: "missing `#dim D` header".into(),
                });
            };
            let line = line?;
            let trimmed = line.trim();
            if trimmed.is_empty() {
                continue;
            }
            let dim = trimmed
                .strip_prefix("#dim")
                .and_then(|d| d.trim().parse::<usize>().ok())
                .ok_or_else(|| RetrievalError::MalformedRow {
                    line: i + 1,
                    reason: format!("expected `#dim D` header, found {trimmed:?}"),
                })?;
            break dim;
        };
        let mut store = Self::new(dim);
        for (i, line) in lines {
            let line = line?;
            let lineno = i + 1;
            if line.trim().is_empty() {
                continue;
            }
            let (id, rest) = line.split_once('\t').ok_or_else(|| RetrievalError::MalformedRow {
                line: lineno,
                reason: "missing tab between card id and vector".into(),
            })?;
            if id.is_empty() {
                return Err(RetrievalError::MalformedRow {
                    line: lineno,
                    reason: "empty card id".into(),
                });
            }
            let values = rest
                .split_ascii_whitespace()
                .map(|tok| {
                    tok.parse::<f32>().map_err(|e| RetrievalError::MalformedRow {
                        line: lineno,
                        reason: format!("bad float {tok:?}: {e}"),
                    })
                })
                .collect::<Result<Vec<_>, _>>()?;
            store.insert_at(
                EmbeddingVector {
                    card_id: CardId::new(id),
                    values,
                },
                Some(lineno),
            )?;
        }
        Ok(store)
    }

    pub fn read_binary(mut reader: impl Read) -> Result<Self, RetrievalError> {
        let mut magic = [0u8; 4];
        reader.read_exact(&mut magic)?;
        if &magic != BINARY_MAGIC {
            return Err(RetrievalError::MalformedRow {
                line: 0,
                reason: "bad magic".into(),
            });
        }
        let dim = read_u32(&mut reader)?.ok_or_else(|| RetrievalError::MalformedRow {
            line: 0,
            reason: "truncated header".into(),
        })? as usize;
        let mut store = Self::new(dim);
        let mut record = 0usize;
        let mut buf = vec![0u8; dim * 4];
        while let Some(len) = read_u32(&mut reader)? {
            record += 1;
            let truncated = |_| RetrievalError::MalformedRow {
                line: record,
                reason: "truncated record".into(),
            };
            let mut id = vec![0u8; len as usize];
            reader.read_exact(&mut id).map_err(truncated)?;
            let id = String::from_utf8(id).map_err(|_| RetrievalError::MalformedRow {
                line: record,
                reason: "card id is not UTF-8".into(),
            })?;
            reader.read_exact(&mut buf).map_err(truncated)?;
            let values = buf.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
            store.insert_at(
                EmbeddingVector {
                    card_id: CardId::new(id),
                    values,
                },
                Some(record),
            )?;
        }
        Ok(store)
    }

    pub fn write_text(&self, mut w: impl Write) -> io::Result<()> {
        writeln!(w, "#dim {}", self.dim)?;
        for (id, v) in self.iter() {
            write!(w, "{id}\t")?;
            for (j, x) in v.iter().enumerate() {
                if j > 0 {
                    w.write_all(b" ")?;
                }
                write!(w, "{x:e}")?;
            }
            writeln!(w)?;
        }
        Ok(())
    }

    pub fn write_binary(&self, mut w: impl Write) -> io::Result<()> {
        w.write_all(BINARY_MAGIC)?;
        w.write_all(&(self.dim as u32).to_le_bytes())?;
        for (id, v) in self.iter() {
            w.write_all(&(id.as_str().len() as u32).to_le_bytes())?;
            w.write_all(id.as_str().as_bytes())?;
            for x in v {
                w.write_all(&x.to_le_bytes())?;
            }
        }
        Ok(())
    }
}

fn read_u32(r: &mut impl Read) -> io::Result<Option<u32>> {
    let mut b = [0u8; 4];
    let mut filled = 0;
    while filled < 4 {
        match r.read(&mut b[filled..])? {
            0 if filled == 0 => return Ok(None),
            0 => return Err(io::Error::new(io::ErrorKind::UnexpectedEof, "truncated u32")),
            n => filled += n,
        }
    }
    Ok(Some(u32::from_le_bytes(b)))
}

/// Raw inner product, accumulated in `f64`.
pub fn score(query: &[f32], doc: &[f32]) -> Result<f64, RetrievalError> {
    if query.len() != doc.len() {
        return Err(RetrievalError::DimensionMismatch {
            expected: query.len(),
            found: doc.len(),
            line: None,
        });
    }
    Ok(dot(query, doc))
}

#[inline]
pub(crate) fn dot(a: &[f32], b: &[f32]) -> f64 {
    // Four independent accumulators let the compiler vectorize.
    let mut acc = [0f64; 4];
    let mut ca = a.chunks_exact(4);
    let mut cb = b.chunks_exact(4);
    for (x, y) in (&mut ca).zip(&mut cb) {
        for j in 0..4 {
            acc[j] += x[j] as f64 * y[j] as f64;
        }
    }
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| *x as f64 * *y as f64).sum();
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

#[derive(Debug, Clone, PartialEq)]
pub struct RetrievedCard {
    pub card_id: CardId,
    pub score: f64,
}

/// Retrieved history cards, best first.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RetrievedSet {
    pub entries: Vec<RetrievedCard>,
}

impl RetrievedSet {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = &CardId> {
        self.entries.iter().map(|e| &e.card_id)
    }
}

fn rank(a: &RetrievedCard, b: &RetrievedCard) -> Ordering {
    b.score.total_cmp(&a.score).then_with(|| a.card_id.cmp(&b.card_id))
}

/// Exact top-`k` of `candidates` by inner product with `query`.
///
/// Ties on score break by ascending card id. Candidates are expected to be distinct.
pub fn top_k<'a>(store: &EmbeddingStore, query: &[f32], candidates: impl IntoIterator<Item = &'a CardId>, k: usize) -> Result<RetrievedSet, RetrievalError> {
    if k == 0 {
        return Ok(RetrievedSet::default());
    }
    let mut scored = Vec::new();
    for id in candidates {
        let v = store.require(id.as_str())?;
        scored.push(RetrievedCard {
            card_id: id.clone(),
            score: score(query, v)?,
        });
    }
    if scored.len() > k {
        scored.select_nth_unstable_by(k - 1, rank);
        scored.truncate(k);
    }
    scored.sort_unstable_by(rank);
    Ok(RetrievedSet { entries: scored })
}

/// Top-`k` distinct history cards most similar to `query_card`.
pub fn retrieve_topk(store: &EmbeddingStore, history: &StudyHistory, query_card: &str, k: usize) -> Result<RetrievedSet, RetrievalError> {
    let query = store.require(query_card)?;
    let mut seen = HashSet::new();
    let unique = history.records().iter().map(|r| &r.card_id).filter(|id| seen.insert(*id));
    top_k(store, query, unique, k)
}

/// Top-`k` over the distinct cards of a replayed history.
pub fn retrieve_topk_replay(store: &EmbeddingStore, replay: &UserReplay, query_card: &str, k: usize) -> Result<RetrievedSet, RetrievalError> {
    let query = store.require(query_card)?;
    top_k(store, query, replay.studied_cards(), k)
}

/// The `k` most recently studied distinct cards, most recent first, with score 0.
pub fn past_k(history: &StudyHistory, k: usize) -> RetrievedSet {
    let mut seen = HashSet::new();
    let entries = history
        .records()
        .iter()
        .rev()
        .filter(|r| seen.insert(&r.card_id))
        .take(k)
        .map(|r| RetrievedCard {
            card_id: r.card_id.clone(),
            score: 0.0,
        })
        .collect();
    RetrievedSet { entries }
}

/// [`past_k`] over a replayed history.
pub fn past_k_replay(replay: &UserReplay, k: usize) -> RetrievedSet {
    let entries = replay
        .recent_cards(k)
        .into_iter()
        .map(|id| RetrievedCard {
            card_id: id.clone(),
            score: 0.0,
        })
        .collect();
    RetrievedSet { entries }
}
