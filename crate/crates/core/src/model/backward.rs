//! Exact manual backpropagation through the full model.
//!
//! The gradient record shares the parameter layout ([`HstuParams`]), so the
//! optimizer and the finite-difference oracle can walk parameters and
//! gradients in lockstep.

use rand::Rng;

use crate::chunk::SequenceChunk;
use crate::error::Result;
use crate::flops::tally;
use crate::model::forward::{loss_detail, tri, LossBreakdown, NormCache};
use crate::model::{silu_prime, time_bucket, HstuModel, HstuParams};
use crate::tensor::{matmul_at, matmul_bt, Mat};

/// Which loss the gradients are taken of.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossMode {
    /// Total training loss: sampled item CE over all predicting positions
    /// plus weighted action CE.
    Training { negatives: usize },
    /// Full-softmax item CE of the final position only. Used by the
    /// gradient-based representation.
    FinalItem,
}

fn layernorm_backward(
    dy: &Mat,
    norm: &NormCache,
    gamma: &[f64],
    dgamma: &mut [f64],
    dbeta: &mut [f64],
) -> Mat {
    let (n, d) = (dy.rows, dy.cols);
    let mut dx = Mat::zeros(n, d);
    for i in 0..n {
        let dyi = dy.row(i);
        let xh = norm.xhat.row(i);
        let mut mean_dxh = 0.0;
        let mut mean_dxh_xh = 0.0;
        for j in 0..d {
            let dxh = dyi[j] * gamma[j];
            dgamma[j] += dyi[j] * xh[j];
            dbeta[j] += dyi[j];
            mean_dxh += dxh;
            mean_dxh_xh += dxh * xh[j];
        }
        mean_dxh /= d as f64;
        mean_dxh_xh /= d as f64;
        let is = norm.inv_std[i];
        let dxi = dx.row_mut(i);
        for j in 0..d {
            let dxh = dyi[j] * gamma[j];
            dxi[j] = is * (dxh - mean_dxh - xh[j] * mean_dxh_xh);
        }
    }
    tally((7 * n * d) as u64);
    dx
}

/// Gradients of the selected loss with respect to every parameter.
/// Deterministic given the rng state (negative sampling is the only
/// stochastic step, and final-item mode uses none).
pub fn backward(
    chunk: &SequenceChunk,
    model: &HstuModel,
    mode: LossMode,
    rng: &mut impl Rng,
) -> Result<(LossBreakdown, HstuParams)> {
    let (lb, cache, details) = loss_detail(chunk, model, mode, rng)?;
    let cfg = &model.cfg;
    let d = cfg.dim;
    let n = cache.hidden.rows;
    let lambda = cfg.action_loss_weight;
    let p_count = details.len() as f64;
    let mut grads = model.params.zeros_like();

    // Head backprop into dH.
    let mut dh = Mat::zeros(n, d);
    for pl in &details {
        let h = cache.hidden.row(pl.pos);
        for (idx, &c) in pl.cands.iter().enumerate() {
            let c = c as usize;
            let g = (pl.item_probs[idx] - if idx == pl.target_index { 1.0 } else { 0.0 }) / p_count;
            let dhi = dh.row_mut(pl.pos);
            match (&model.params.item_head, &mut grads.item_head) {
                (Some(head), Some(ghead)) => {
                    for k in 0..d {
                        dhi[k] += g * head.at(k, c);
                        *ghead.at_mut(k, c) += g * h[k];
                    }
                }
                _ => {
                    // Tied head: the embedding row doubles as the head column.
                    for k in 0..d {
                        dhi[k] += g * model.params.item_embedding.at(c, k);
                        *grads.item_embedding.at_mut(c, k) += g * h[k];
                    }
                }
            }
        }
        tally((2 * pl.cands.len() * d) as u64);

        if let Some(act) = &pl.action {
            let head = &model.params.action_head;
            let reason_n = cfg.reason_alphabet;
            let dhi = dh.row_mut(pl.pos);
            for (c, &p) in act.reason_probs.iter().enumerate() {
                let g = lambda * (p - if c == act.reason_target { 1.0 } else { 0.0 }) / p_count;
                for k in 0..d {
                    dhi[k] += g * head.at(k, c);
                    *grads.action_head.at_mut(k, c) += g * h[k];
                }
            }
            for (c, &p) in act.type_probs.iter().enumerate() {
                let g = lambda * (p - if c == act.type_target { 1.0 } else { 0.0 }) / p_count;
                for k in 0..d {
                    dhi[k] += g * head.at(k, reason_n + c);
                    *grads.action_head.at_mut(k, reason_n + c) += g * h[k];
                }
            }
            tally((2 * cfg.action_alphabet() * d) as u64);
        }
    }

    // Final layer norm.
    let mut dx = layernorm_backward(
        &dh,
        &cache.final_norm,
        &model.params.final_gamma,
        &mut grads.final_gamma,
        &mut grads.final_beta,
    );

    // Blocks in reverse.
    for b in (0..cfg.depth).rev() {
        let blk = &model.params.blocks[b];
        let gblk = &mut grads.blocks[b];
        let bc = &cache.blocks[b];
        let (u_off, v_off, q_off, k_off) = (0, d, 2 * d, 3 * d);

        // dx is the gradient wrt the block output X_out = [X_in +] Ŝ.
        let dy = dx.clone();
        let mut dx_in = if cfg.residual { dx } else { Mat::zeros(n, d) };
        if cfg.residual {
            tally((n * d) as u64);
        }

        // f2: Ŝ = G·W2 + b2 with G = M ⊙ U.
        let mut g_mat = Mat::zeros(n, d);
        for i in 0..n {
            let mi = bc.m.row(i);
            let ui = &bc.p.row(i)[u_off..u_off + d];
            let gi = g_mat.row_mut(i);
            for j in 0..d {
                gi[j] = mi[j] * ui[j];
            }
        }
        let dg = matmul_bt(&dy, &blk.w2);
        let dw2 = matmul_at(&g_mat, &dy);
        for (a, b_) in gblk.w2.data.iter_mut().zip(&dw2.data) {
            *a += b_;
        }
        for i in 0..n {
            for (db, v) in gblk.b2.iter_mut().zip(dy.row(i)) {
                *db += v;
            }
        }
        tally((n * d) as u64);

        // Hadamard gate.
        let mut dm = Mat::zeros(n, d);
        let mut du = Mat::zeros(n, d);
        for i in 0..n {
            let dgi = dg.row(i);
            let mi = bc.m.row(i);
            let ui = &bc.p.row(i)[u_off..u_off + d];
            for j in 0..d {
                *dm.at_mut(i, j) = dgi[j] * ui[j];
                *du.at_mut(i, j) = dgi[j] * mi[j];
            }
        }
        tally((2 * n * d) as u64);

        let dc = layernorm_backward(&dm, &bc.norm, &blk.gamma, &mut gblk.gamma, &mut gblk.beta);

        // Attention backward.
        let mut dv = Mat::zeros(n, d);
        let mut dq = Mat::zeros(n, d);
        let mut dk = Mat::zeros(n, d);
        let pairs = n * (n + 1) / 2;
        for i in 0..n {
            let dci = dc.row(i);
            for j in 0..=i {
                let t = tri(i, j);
                let vj = &bc.p.row(j)[v_off..v_off + d];
                let mut da = 0.0;
                for (x, y) in dci.iter().zip(vj) {
                    da += x * y;
                }
                let aij = bc.a[t];
                for (dvj, x) in dv.row_mut(j).iter_mut().zip(dci) {
                    *dvj += aij * x;
                }
                let ds = da * silu_prime(bc.s[t]);
                for k in 0..d {
                    *dq.at_mut(i, k) += ds * bc.p.at(j, k_off + k);
                    *dk.at_mut(j, k) += ds * bc.p.at(i, q_off + k);
                }
                grads.rab_pos[i - j] += ds;
                grads.rab_time[time_bucket(cache.ts[i] - cache.ts[j], model.params.rab_time.len())] += ds;
            }
        }
        tally((4 * pairs * d + 2 * pairs) as u64);

        // Reassemble dP, push through the split activation and f1.
        let mut dp = Mat::zeros(n, 4 * d);
        for i in 0..n {
            let row = dp.row_mut(i);
            row[u_off..u_off + d].copy_from_slice(du.row(i));
            row[v_off..v_off + d].copy_from_slice(dv.row(i));
            row[q_off..q_off + d].copy_from_slice(dq.row(i));
            row[k_off..k_off + d].copy_from_slice(dk.row(i));
        }
        let mut dz = dp;
        for (z, g) in bc.z.data.iter().zip(dz.data.iter_mut()) {
            *g *= silu_prime(*z);
        }
        tally((n * 4 * d) as u64);

        let dw1 = matmul_at(&bc.x_in, &dz);
        for (a, b_) in gblk.w1.data.iter_mut().zip(&dw1.data) {
            *a += b_;
        }
        for i in 0..n {
            for (db, v) in gblk.b1.iter_mut().zip(dz.row(i)) {
                *db += v;
            }
        }
        tally((n * 4 * d) as u64);
        let dx_from_z = matmul_bt(&dz, &blk.w1);
        for (a, b_) in dx_in.data.iter_mut().zip(&dx_from_z.data) {
            *a += b_;
        }
        dx = dx_in;
    }

    // Scatter dE into the embedding tables.
    let user = chunk.user_token() as usize;
    for (gu, v) in grads.user_embedding.row_mut(user).iter_mut().zip(dx.row(0)) {
        *gu += v;
    }
    for (k, ev) in chunk.events.iter().enumerate() {
        let de = dx.row(k + 1);
        for j in 0..d {
            *grads.item_embedding.at_mut(ev.item_id as usize, j) += de[j];
            *grads.reason_embedding.at_mut(ev.reason_end as usize, j) += de[j];
            *grads.type_embedding.at_mut(ev.interaction_type as usize, j) += de[j];
        }
    }
    tally((d * (1 + 3 * (n - 1))) as u64);

    Ok((lb, grads))
}
