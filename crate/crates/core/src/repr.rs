//! Chunk representations for data selection.
//!
//! Three extractors, cheapest to most expensive:
//! - token bag: a sparse multiset of item/action tokens, compared with BM25;
//! - mean hidden state: model forward pass, final hidden states averaged over
//!   positions (dimension d), compared with cosine;
//! - head gradient: backward pass of the final-item loss, the last block's f1
//!   weight gradient mean-pooled over the input axis (dimension 4d), compared
//!   with cosine.

use std::collections::BTreeMap;
use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::chunk::{ChunkId, SequenceChunk};
use crate::error::{Error, Result};
use crate::flops::tally;
use crate::model::{backward, forward_hidden, HstuModel, LossMode};

/// Which extractor produced a representation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReprKind {
    TokenBag,
    RepSim,
    GradSim,
}

impl std::fmt::Display for ReprKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ReprKind::TokenBag => write!(f, "token_bag"),
            ReprKind::RepSim => write!(f, "rep_sim"),
            ReprKind::GradSim => write!(f, "grad_sim"),
        }
    }
}

/// A chunk representation: dense vector or sparse token counts, never both.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReprVector {
    pub kind: ReprKind,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub dense: Vec<f64>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub counts: BTreeMap<String, u32>,
}

impl ReprVector {
    pub fn dim(&self) -> usize {
        if self.kind == ReprKind::TokenBag {
            self.counts.len()
        } else {
            self.dense.len()
        }
    }

    /// Total token count of a bag (document length for BM25).
    pub fn bag_len(&self) -> u64 {
        self.counts.values().map(|&c| c as u64).sum()
    }
}

/// Sparse token multiset over item ids and action codes.
pub fn token_repr(chunk: &SequenceChunk) -> ReprVector {
    let mut counts = BTreeMap::new();
    for ev in &chunk.events {
        for tok in [
            format!("item:{}", ev.item_id),
            format!("reason_end:{}", ev.reason_end),
            format!("interaction_type:{}", ev.interaction_type),
        ] {
            *counts.entry(tok).or_insert(0) += 1;
        }
    }
    ReprVector { kind: ReprKind::TokenBag, dense: Vec::new(), counts }
}

/// Mean of the final hidden states over all positions (user token included).
pub fn repsim_repr(chunk: &SequenceChunk, model: &HstuModel) -> Result<ReprVector> {
    let cache = forward_hidden(chunk, model)?;
    let h = &cache.hidden;
    let (n, d) = (h.rows, h.cols);
    let mut dense = vec![0.0; d];
    for i in 0..n {
        for (acc, v) in dense.iter_mut().zip(h.row(i)) {
            *acc += v;
        }
    }
    let inv = 1.0 / n as f64;
    dense.iter_mut().for_each(|v| *v *= inv);
    tally((n * d + d) as u64);
    Ok(ReprVector { kind: ReprKind::RepSim, dense, counts: BTreeMap::new() })
}

/// Gradient fingerprint: the last block's f1 weight gradient under the
/// final-item loss, mean-pooled over the input dimension (rows), length 4d.
pub fn gradsim_repr(chunk: &SequenceChunk, model: &HstuModel) -> Result<ReprVector> {
    // FinalItem mode is deterministic; the rng is never consumed.
    let mut rng = rand::rngs::mock::StepRng::new(0, 0);
    let (_, grads) = backward(chunk, model, LossMode::FinalItem, &mut rng)?;
    let w1 = &grads.blocks.last().expect("depth >= 1").w1;
    let (rows, cols) = (w1.rows, w1.cols);
    let mut dense = vec![0.0; cols];
    for i in 0..rows {
        for (acc, v) in dense.iter_mut().zip(w1.row(i)) {
            *acc += v;
        }
    }
    let inv = 1.0 / rows as f64;
    dense.iter_mut().for_each(|v| *v *= inv);
    tally((rows * cols + cols) as u64);
    Ok(ReprVector { kind: ReprKind::GradSim, dense, counts: BTreeMap::new() })
}

/// Extracts the representation of `kind` for one chunk.
pub fn extract(chunk: &SequenceChunk, model: &HstuModel, kind: ReprKind) -> Result<ReprVector> {
    match kind {
        ReprKind::TokenBag => Ok(token_repr(chunk)),
        ReprKind::RepSim => repsim_repr(chunk, model),
        ReprKind::GradSim => gradsim_repr(chunk, model),
    }
}

/// Cosine similarity; a vector with norm below 1e-12 is treated as orthogonal
/// to everything.
pub fn cosine_sim(a: &ReprVector, b: &ReprVector) -> Result<f64> {
    if a.kind != b.kind {
        return Err(Error::data(format!("cosine: mixed kinds {} vs {}", a.kind, b.kind)));
    }
    if a.dense.len() != b.dense.len() {
        return Err(Error::data(format!(
            "cosine: dimension mismatch {} vs {}",
            a.dense.len(),
            b.dense.len()
        )));
    }
    let mut dot = 0.0;
    let mut na = 0.0;
    let mut nb = 0.0;
    for (x, y) in a.dense.iter().zip(&b.dense) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    tally(3 * a.dense.len() as u64);
    let denom = na.sqrt() * nb.sqrt();
    if denom < 1e-12 {
        return Ok(0.0);
    }
    Ok(dot / denom)
}

/// Document-frequency statistics for BM25 over a fixed corpus of token bags.
#[derive(Debug, Clone)]
pub struct CorpusStats {
    pub doc_count: usize,
    pub avg_len: f64,
    df: BTreeMap<String, u32>,
}

impl CorpusStats {
    pub fn build(docs: &[&ReprVector]) -> Result<CorpusStats> {
        if docs.is_empty() {
            return Err(Error::data("bm25: empty corpus"));
        }
        let mut df = BTreeMap::new();
        let mut total_len = 0u64;
        for doc in docs {
            if doc.kind != ReprKind::TokenBag {
                return Err(Error::data("bm25: corpus must contain token bags"));
            }
            total_len += doc.bag_len();
            for tok in doc.counts.keys() {
                *df.entry(tok.clone()).or_insert(0) += 1;
            }
        }
        Ok(CorpusStats {
            doc_count: docs.len(),
            avg_len: total_len as f64 / docs.len() as f64,
            df,
        })
    }

    pub fn df(&self, token: &str) -> u32 {
        self.df.get(token).copied().unwrap_or(0)
    }

    /// Smoothed idf; non-negative for every document frequency.
    pub fn idf(&self, token: &str) -> f64 {
        let n = self.doc_count as f64;
        let df = self.df(token) as f64;
        ((n - df + 0.5) / (df + 0.5) + 1.0).ln()
    }
}

pub const BM25_K1: f64 = 1.2;
pub const BM25_B: f64 = 0.75;

/// Okapi BM25 score of `doc` for the tokens of `query`.
pub fn bm25_sim(query: &ReprVector, doc: &ReprVector, stats: &CorpusStats) -> Result<f64> {
    if query.kind != ReprKind::TokenBag || doc.kind != ReprKind::TokenBag {
        return Err(Error::data("bm25: both sides must be token bags"));
    }
    let doc_len = doc.bag_len() as f64;
    let len_norm = 1.0 - BM25_B + BM25_B * doc_len / stats.avg_len;
    let mut score = 0.0;
    for tok in query.counts.keys() {
        let tf = doc.counts.get(tok).copied().unwrap_or(0) as f64;
        if tf == 0.0 {
            continue;
        }
        score += stats.idf(tok) * tf * (BM25_K1 + 1.0) / (tf + BM25_K1 * len_norm);
    }
    tally(4 * query.counts.len() as u64);
    Ok(score)
}

/// Pairwise similarity under the representation's native measure: BM25 for
/// token bags (candidate as query, reference as document), cosine otherwise.
pub fn similarity(
    cand: &ReprVector,
    reference: &ReprVector,
    stats: Option<&CorpusStats>,
) -> Result<f64> {
    match cand.kind {
        ReprKind::TokenBag => {
            let stats = stats.ok_or_else(|| Error::data("bm25: corpus stats required"))?;
            bm25_sim(cand, reference, stats)
        }
        _ => cosine_sim(cand, reference),
    }
}

#[derive(Serialize)]
struct ReprRecord<'a> {
    chunk: String,
    kind: ReprKind,
    dim: usize,
    #[serde(skip_serializing_if = "<[f64]>::is_empty")]
    dense: &'a [f64],
    #[serde(skip_serializing_if = "BTreeMap::is_empty")]
    counts: &'a BTreeMap<String, u32>,
}

/// Dumps representations as JSON lines, one chunk per line.
pub fn write_reprs(
    path: impl AsRef<Path>,
    entries: &[(ChunkId, &ReprVector)],
) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut w = std::io::BufWriter::new(file);
    for (id, r) in entries {
        let rec = ReprRecord {
            chunk: id.to_string(),
            kind: r.kind,
            dim: r.dim(),
            dense: &r.dense,
            counts: &r.counts,
        };
        let line = serde_json::to_string(&rec).map_err(|e| Error::data(format!("repr dump: {e}")))?;
        writeln!(w, "{line}")?;
    }
    Ok(())
}
