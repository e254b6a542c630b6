//! Forward pass: embedding, HSTU blocks, output heads, and the training loss.
//!
//! All intermediate activations needed by the manual backward pass are kept
//! in [`HiddenCache`]. Attention matrices are stored packed lower-triangular
//! (the causal mask zeroes everything above the diagonal after the SiLU, so
//! masked entries are simply never materialized).

use rand::Rng;

use crate::chunk::SequenceChunk;
use crate::error::{Error, Result};
use crate::flops::tally;
use crate::model::{silu, time_bucket, HstuModel};
use crate::tensor::{matmul, Mat};

/// Packed lower-triangular index for (i, j), j <= i.
#[inline]
pub(crate) fn tri(i: usize, j: usize) -> usize {
    i * (i + 1) / 2 + j
}

#[derive(Debug, Clone)]
pub(crate) struct NormCache {
    pub xhat: Mat,
    pub inv_std: Vec<f64>,
}

/// Row-wise layer norm: y = gamma ⊙ (x − mean)/std + beta.
pub(crate) fn layernorm(x: &Mat, gamma: &[f64], beta: &[f64], eps: f64) -> (Mat, NormCache) {
    let (n, d) = (x.rows, x.cols);
    let mut y = Mat::zeros(n, d);
    let mut xhat = Mat::zeros(n, d);
    let mut inv_std = vec![0.0; n];
    for i in 0..n {
        let row = x.row(i);
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let is = 1.0 / (var + eps).sqrt();
        inv_std[i] = is;
        for j in 0..d {
            let xh = (row[j] - mean) * is;
            *xhat.at_mut(i, j) = xh;
            *y.at_mut(i, j) = gamma[j] * xh + beta[j];
        }
    }
    tally((4 * n * d) as u64);
    (y, NormCache { xhat, inv_std })
}

#[derive(Debug, Clone)]
pub(crate) struct BlockCache {
    pub x_in: Mat,
    /// Pre-activation projection, N×4d.
    pub z: Mat,
    /// SiLU(z); splits into U | V | Q | K.
    pub p: Mat,
    /// Packed pre-activation attention scores (j <= i).
    pub s: Vec<f64>,
    /// Packed SiLU(s); the post-mask attention matrix A.
    pub a: Vec<f64>,
    pub norm: NormCache,
    /// Norm(AV).
    pub m: Mat,
}

/// Everything the backward pass and the representation extractors need.
#[derive(Debug, Clone)]
pub struct HiddenCache {
    pub(crate) ts: Vec<i64>,
    pub(crate) blocks: Vec<BlockCache>,
    pub(crate) final_norm: NormCache,
    /// Final hidden states H (post final layer norm), N×d.
    pub hidden: Mat,
}

/// Per-position timestamps; the user token at position 0 inherits the first
/// event's timestamp so time deltas are well defined.
pub(crate) fn timestamps(chunk: &SequenceChunk) -> Vec<i64> {
    let mut ts = Vec::with_capacity(chunk.len() + 1);
    ts.push(chunk.events[0].timestamp);
    ts.extend(chunk.events.iter().map(|e| e.timestamp));
    ts
}

fn check_chunk(chunk: &SequenceChunk, model: &HstuModel) -> Result<()> {
    if chunk.len() < 2 {
        return Err(Error::data(format!("chunk {}: needs at least 2 events", chunk.id)));
    }
    if chunk.len() > model.cfg.max_len {
        return Err(Error::data(format!(
            "chunk {}: {} events exceeds max_len {}",
            chunk.id,
            chunk.len(),
            model.cfg.max_len
        )));
    }
    Ok(())
}

/// Token embedding sequence E: position 0 is the user token, each event
/// contributes the sum of its item and action-field embeddings.
pub fn embed(chunk: &SequenceChunk, model: &HstuModel) -> Result<Mat> {
    check_chunk(chunk, model)?;
    let p = &model.params;
    let d = model.cfg.dim;
    let user = chunk.user_token() as usize;
    if user >= p.user_embedding.rows {
        return Err(Error::data(format!("chunk {}: user {} out of table bounds", chunk.id, user)));
    }
    let n = chunk.len() + 1;
    let mut e = Mat::zeros(n, d);
    e.row_mut(0).copy_from_slice(p.user_embedding.row(user));
    for (k, ev) in chunk.events.iter().enumerate() {
        let item = ev.item_id as usize;
        if item >= p.item_embedding.rows {
            return Err(Error::data(format!(
                "chunk {}: item {} out of vocabulary (size {}); register new items first",
                chunk.id, item, p.item_embedding.rows
            )));
        }
        let reason = ev.reason_end as usize;
        let itype = ev.interaction_type as usize;
        if reason >= p.reason_embedding.rows || itype >= p.type_embedding.rows {
            return Err(Error::data(format!("chunk {}: action code out of alphabet bounds", chunk.id)));
        }
        let row = e.row_mut(k + 1);
        for j in 0..d {
            row[j] = p.item_embedding.at(item, j)
                + p.reason_embedding.at(reason, j)
                + p.type_embedding.at(itype, j);
        }
    }
    tally((d * (1 + 3 * (n - 1))) as u64);
    Ok(e)
}

fn block_forward(
    x: &Mat,
    ts: &[i64],
    model: &HstuModel,
    block_index: usize,
) -> Result<(Mat, BlockCache)> {
    let d = model.cfg.dim;
    let n = x.rows;
    let blk = &model.params.blocks[block_index];

    // f1 projection and split activation.
    let mut z = matmul(x, &blk.w1);
    for i in 0..n {
        let row = z.row_mut(i);
        for (v, b) in row.iter_mut().zip(&blk.b1) {
            *v += b;
        }
    }
    tally((n * 4 * d) as u64);
    let mut p = z.clone();
    p.data.iter_mut().for_each(|v| *v = silu(*v));

    let (u_off, v_off, q_off, k_off) = (0, d, 2 * d, 3 * d);

    // Causal SiLU attention with relative position/time biases.
    let pairs = n * (n + 1) / 2;
    let mut s = vec![0.0; pairs];
    let mut a = vec![0.0; pairs];
    let rab_pos = &model.params.rab_pos;
    let rab_time = &model.params.rab_time;
    for i in 0..n {
        let qi = &p.row(i)[q_off..q_off + d];
        for j in 0..=i {
            let kj = &p.row(j)[k_off..k_off + d];
            let mut dot = 0.0;
            for (a_, b_) in qi.iter().zip(kj) {
                dot += a_ * b_;
            }
            let bias = rab_pos[i - j] + rab_time[time_bucket(ts[i] - ts[j], rab_time.len())];
            let sv = dot + bias;
            s[tri(i, j)] = sv;
            a[tri(i, j)] = silu(sv);
        }
    }
    tally((pairs * d + 2 * pairs) as u64);

    // Spatial aggregation C = A·V.
    let mut c = Mat::zeros(n, d);
    for i in 0..n {
        for j in 0..=i {
            let aij = a[tri(i, j)];
            let vj = &p.row(j)[v_off..v_off + d];
            let ci = c.row_mut(i);
            for (cv, vv) in ci.iter_mut().zip(vj) {
                *cv += aij * vv;
            }
        }
    }
    tally((pairs * d) as u64);

    let (m, norm) = layernorm(&c, &blk.gamma, &blk.beta, model.cfg.norm_eps);

    // Pointwise transformation f2(Norm(AV) ⊙ U).
    let mut g = Mat::zeros(n, d);
    for i in 0..n {
        let mi = m.row(i);
        let ui = &p.row(i)[u_off..u_off + d];
        let gi = g.row_mut(i);
        for j in 0..d {
            gi[j] = mi[j] * ui[j];
        }
    }
    tally((n * d) as u64);
    let mut s_hat = matmul(&g, &blk.w2);
    for i in 0..n {
        let row = s_hat.row_mut(i);
        for (v, b) in row.iter_mut().zip(&blk.b2) {
            *v += b;
        }
    }
    tally((n * d) as u64);

    if !s_hat.is_finite() {
        return Err(Error::numerical(format!("non-finite activation in block {block_index}")));
    }

    let cache = BlockCache { x_in: x.clone(), z, p, s, a, norm, m };
    Ok((s_hat, cache))
}

/// One HSTU block applied to an embedding sequence; returns Ŝ (the block
/// output before any residual add).
pub fn hstu_block(x: &Mat, ts: &[i64], model: &HstuModel, block_index: usize) -> Result<Mat> {
    if block_index >= model.params.blocks.len() {
        return Err(Error::config(format!("block index {block_index} out of range")));
    }
    if x.rows != ts.len() {
        return Err(Error::data("hstu_block: sequence/timestamp length mismatch"));
    }
    Ok(block_forward(x, ts, model, block_index)?.0)
}

/// Embedding + block cascade + final layer norm; the cache feeds the
/// backward pass and the representation extractors.
pub fn forward_hidden(chunk: &SequenceChunk, model: &HstuModel) -> Result<HiddenCache> {
    let ts = timestamps(chunk);
    let mut x = embed(chunk, model)?;
    let mut blocks = Vec::with_capacity(model.cfg.depth);
    for b in 0..model.cfg.depth {
        let (s_hat, cache) = block_forward(&x, &ts, model, b)?;
        x = if model.cfg.residual {
            let mut out = s_hat;
            for (o, xv) in out.data.iter_mut().zip(&cache.x_in.data) {
                *o += xv;
            }
            tally(out.data.len() as u64);
            out
        } else {
            s_hat
        };
        blocks.push(cache);
    }
    let (hidden, final_norm) =
        layernorm(&x, &model.params.final_gamma, &model.params.final_beta, model.cfg.norm_eps);
    Ok(HiddenCache { ts, blocks, final_norm, hidden })
}

/// Forward output: hidden states plus full logits for both heads.
///
/// Item logits at position p score the item of the next event; action logits
/// likewise score the next event's action fields (reason-end columns first,
/// then interaction-type).
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub hidden: Mat,
    /// N × vocab.
    pub item_logits: Mat,
    /// N × (reason_alphabet + interaction_alphabet).
    pub action_logits: Mat,
}

pub fn forward(chunk: &SequenceChunk, model: &HstuModel) -> Result<ForwardOutput> {
    let cache = forward_hidden(chunk, model)?;
    let h = &cache.hidden;
    let vocab = model.vocab();
    let mut item_logits = Mat::zeros(h.rows, vocab);
    for i in 0..h.rows {
        let hi = h.row(i);
        let row = item_logits.row_mut(i);
        for (c, out) in row.iter_mut().enumerate() {
            *out = match &model.params.item_head {
                Some(head) => hi.iter().enumerate().map(|(k, &x)| x * head.at(k, c)).sum(),
                None => hi.iter().zip(model.params.item_embedding.row(c)).map(|(x, y)| x * y).sum(),
            };
        }
    }
    tally((h.rows * vocab * model.cfg.dim) as u64);
    let action_logits = matmul(h, &model.params.action_head);
    Ok(ForwardOutput { hidden: cache.hidden, item_logits, action_logits })
}

/// Scalar loss with per-head breakdown.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub item: f64,
    pub action: f64,
}

/// Per-position softmax state kept for the backward pass.
#[derive(Debug, Clone)]
pub(crate) struct PositionLoss {
    /// Sequence position whose hidden state makes the prediction.
    pub pos: usize,
    /// Candidate item ids; `target_index` points at the true next item.
    pub cands: Vec<u32>,
    pub target_index: usize,
    pub item_probs: Vec<f64>,
    /// None in final-item mode (no action loss there).
    pub action: Option<ActionLoss>,
}

#[derive(Debug, Clone)]
pub(crate) struct ActionLoss {
    pub reason_probs: Vec<f64>,
    pub reason_target: usize,
    pub type_probs: Vec<f64>,
    pub type_target: usize,
}

fn softmax_ce(logits: &[f64], target: usize) -> (f64, Vec<f64>) {
    let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - mx).exp()).collect();
    let sum: f64 = exps.iter().sum();
    let lse = mx + sum.ln();
    let probs = exps.into_iter().map(|e| e / sum).collect();
    (lse - logits[target], probs)
}

/// Draws `k` distinct negatives from [0, vocab) excluding `target`.
fn sample_negatives(vocab: usize, target: u32, k: usize, rng: &mut impl Rng) -> Vec<u32> {
    if k >= vocab - 1 {
        return (0..vocab as u32).filter(|&c| c != target).collect();
    }
    let mut seen = std::collections::HashSet::with_capacity(k + 1);
    seen.insert(target);
    let mut out = Vec::with_capacity(k);
    while out.len() < k {
        let c = rng.gen_range(0..vocab as u32);
        if seen.insert(c) {
            out.push(c);
        }
    }
    out
}

pub(crate) fn loss_detail(
    chunk: &SequenceChunk,
    model: &HstuModel,
    mode: super::LossMode,
    rng: &mut impl Rng,
) -> Result<(LossBreakdown, HiddenCache, Vec<PositionLoss>)> {
    let cache = forward_hidden(chunk, model)?;
    let d = model.cfg.dim;
    let vocab = model.vocab();
    let reason_n = model.cfg.reason_alphabet;
    let type_n = model.cfg.interaction_alphabet;
    let lambda = model.cfg.action_loss_weight;

    let positions: Vec<usize> = match mode {
        super::LossMode::Training { .. } => (0..chunk.len()).collect(),
        super::LossMode::FinalItem => vec![chunk.len() - 1],
    };
    let p_count = positions.len() as f64;

    let mut item_sum = 0.0;
    let mut action_sum = 0.0;
    let mut details = Vec::with_capacity(positions.len());
    for &pos in &positions {
        let ev = &chunk.events[pos];
        let target = ev.item_id;
        let h = cache.hidden.row(pos);

        let cands: Vec<u32> = match mode {
            super::LossMode::Training { negatives } => {
                if negatives == 0 {
                    return Err(Error::config("loss: negatives must be >= 1"));
                }
                let mut c = vec![target];
                c.extend(sample_negatives(vocab, target, negatives, rng));
                c
            }
            super::LossMode::FinalItem => (0..vocab as u32).collect(),
        };
        let target_index = match mode {
            super::LossMode::Training { .. } => 0,
            super::LossMode::FinalItem => target as usize,
        };
        let logits: Vec<f64> = cands.iter().map(|&c| model.item_score(h, c as usize)).collect();
        tally((cands.len() * d) as u64);
        let (ce, item_probs) = softmax_ce(&logits, target_index);
        item_sum += ce;

        let action = if matches!(mode, super::LossMode::Training { .. }) {
            let head = &model.params.action_head;
            let reason_logits: Vec<f64> =
                (0..reason_n).map(|c| h.iter().enumerate().map(|(k, &x)| x * head.at(k, c)).sum()).collect();
            let type_logits: Vec<f64> = (0..type_n)
                .map(|c| h.iter().enumerate().map(|(k, &x)| x * head.at(k, reason_n + c)).sum())
                .collect();
            tally(((reason_n + type_n) * d) as u64);
            let (reason_ce, reason_probs) = softmax_ce(&reason_logits, ev.reason_end as usize);
            let (type_ce, type_probs) = softmax_ce(&type_logits, ev.interaction_type as usize);
            action_sum += reason_ce + type_ce;
            Some(ActionLoss {
                reason_probs,
                reason_target: ev.reason_end as usize,
                type_probs,
                type_target: ev.interaction_type as usize,
            })
        } else {
            None
        };
        details.push(PositionLoss { pos, cands, target_index, item_probs, action });
    }

    let item = item_sum / p_count;
    let action = action_sum / p_count;
    let total = item + lambda * action;
    if !total.is_finite() {
        return Err(Error::numerical(format!("non-finite loss on chunk {}", chunk.id)));
    }
    Ok((LossBreakdown { total, item, action }, cache, details))
}

/// Training loss: sampled-softmax item cross-entropy plus full-softmax action
/// cross-entropy, averaged over predicting positions.
pub fn loss(
    chunk: &SequenceChunk,
    model: &HstuModel,
    negatives: usize,
    rng: &mut impl Rng,
) -> Result<LossBreakdown> {
    loss_detail(chunk, model, super::LossMode::Training { negatives }, rng).map(|(l, _, _)| l)
}

/// Analytic multiply-add count of one hidden-state forward pass, mirroring
/// the tallies in this module.
pub fn analytic_hidden_flops(cfg: &super::ModelConfig, events: usize) -> f64 {
    let n = events + 1;
    let d = cfg.dim;
    let pairs = n * (n + 1) / 2;
    let embed = d * (1 + 3 * (n - 1));
    let per_block = n * d * 4 * d          // f1
        + n * 4 * d                        // b1
        + pairs * d + 2 * pairs            // QKᵀ + biases
        + pairs * d                        // A·V
        + 4 * n * d                        // layer norm
        + n * d                            // hadamard
        + n * d * d                        // f2
        + n * d                            // b2
        + if cfg.residual { n * d } else { 0 };
    let final_norm = 4 * n * d;
    (embed + cfg.depth * per_block + final_norm) as f64
}

/// Analytic multiply-add count of a full forward pass (hidden states plus
/// full logits for both heads).
pub fn analytic_forward_flops(cfg: &super::ModelConfig, events: usize, vocab: usize) -> f64 {
    let n = events + 1;
    let d = cfg.dim;
    analytic_hidden_flops(cfg, events) + (n * vocab * d + n * d * cfg.action_alphabet()) as f64
}

/// Analytic multiply-add count of one training-loss forward pass
/// (sampled item head, full action head at predicting positions).
pub fn analytic_loss_flops(cfg: &super::ModelConfig, events: usize, negatives: usize) -> f64 {
    let d = cfg.dim;
    analytic_hidden_flops(cfg, events)
        + (events * (negatives + 1) * d + events * cfg.action_alphabet() * d) as f64
}
