//! Next-item ranking metrics: NDCG@K, HR@K, MRR.
//!
//! Each evaluation chunk contributes one prediction: the final item given
//! the preceding history. The rank is the 1-based position of the true item
//! in descending logit order over the full current vocabulary, ties broken
//! by smaller item id.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::chunk::SequenceChunk;
use crate::error::{Error, Result};
use crate::flops::tally;
use crate::model::{forward_hidden, HstuModel};

/// Metrics averaged over an evaluation set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub ndcg: BTreeMap<usize, f64>,
    pub hr: BTreeMap<usize, f64>,
    pub mrr: f64,
    pub count: usize,
}

impl MetricsReport {
    pub fn ndcg_at(&self, k: usize) -> f64 {
        self.ndcg.get(&k).copied().unwrap_or(f64::NAN)
    }
    pub fn hr_at(&self, k: usize) -> f64 {
        self.hr.get(&k).copied().unwrap_or(f64::NAN)
    }
}

/// 1-based rank of `target` in descending logit order; ties rank the smaller
/// item id first.
pub fn rank_of_target(logits: &[f64], target: usize) -> usize {
    let zt = logits[target];
    let mut rank = 1usize;
    for (c, &z) in logits.iter().enumerate() {
        if z > zt || (z == zt && c < target) {
            rank += 1;
        }
    }
    rank
}

/// NDCG contribution of a single relevant item at `rank` under cutoff `k`.
pub fn ndcg_at_rank(rank: usize, k: usize) -> f64 {
    if rank <= k {
        1.0 / ((rank as f64) + 1.0).log2()
    } else {
        0.0
    }
}

/// Final-item ranks for each chunk, over the full current vocabulary.
pub fn target_ranks(chunks: &[SequenceChunk], model: &HstuModel) -> Result<Vec<usize>> {
    let d = model.cfg.dim;
    let vocab = model.vocab();
    let mut ranks = Vec::with_capacity(chunks.len());
    for chunk in chunks {
        let cache = forward_hidden(chunk, model)?;
        // Position len-1 predicts the final event's item.
        let h = cache.hidden.row(chunk.len() - 1);
        let logits: Vec<f64> = (0..vocab).map(|c| model.item_score(h, c)).collect();
        tally((vocab * d) as u64);
        ranks.push(rank_of_target(&logits, chunk.final_item() as usize));
    }
    Ok(ranks)
}

/// Evaluates next-item prediction over `chunks` at each cutoff in `k_list`.
pub fn evaluate(chunks: &[SequenceChunk], model: &HstuModel, k_list: &[usize]) -> Result<MetricsReport> {
    if chunks.is_empty() {
        return Err(Error::data("evaluate: empty evaluation set"));
    }
    let ranks = target_ranks(chunks, model)?;
    Ok(report_from_ranks(&ranks, k_list))
}

/// Aggregates precomputed ranks into a metrics report.
pub fn report_from_ranks(ranks: &[usize], k_list: &[usize]) -> MetricsReport {
    let n = ranks.len() as f64;
    let mut ndcg = BTreeMap::new();
    let mut hr = BTreeMap::new();
    for &k in k_list {
        let nd: f64 = ranks.iter().map(|&r| ndcg_at_rank(r, k)).sum::<f64>() / n;
        let h: f64 = ranks.iter().filter(|&&r| r <= k).count() as f64 / n;
        ndcg.insert(k, nd);
        hr.insert(k, h);
    }
    let mrr = ranks.iter().map(|&r| 1.0 / r as f64).sum::<f64>() / n;
    MetricsReport { ndcg, hr, mrr, count: ranks.len() }
}
