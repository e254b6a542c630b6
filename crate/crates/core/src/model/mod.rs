//! Toy-scale HSTU sequential recommender.
//!
//! Parameters are plain `f64` tensors; the forward pass and the exact manual
//! backward pass live in [`forward`] and [`backward`]. Training (Adam) is in
//! [`train`].
//!
//! Per block, the forward computation is
//! U, V, Q, K = Split(SiLU(f1(X))),
//! A = SiLU(QKᵀ + rab) with a causal mask applied after the activation,
//! Ŝ = f2(Norm(AV) ⊙ U),
//! with an optional residual add around each block and a final layer norm
//! before the two output heads.

mod backward;
mod checkpoint;
mod forward;
mod train;

pub use backward::{backward, LossMode};
pub use checkpoint::Checkpoint;
pub use forward::{
    analytic_forward_flops, analytic_hidden_flops, analytic_loss_flops, embed, forward, hstu_block,
    forward_hidden, loss, ForwardOutput, HiddenCache, LossBreakdown,
};
pub use train::{train, TrainConfig};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Mat;

fn default_dim() -> usize {
    32
}
fn default_depth() -> usize {
    2
}
fn default_max_len() -> usize {
    crate::chunk::DEFAULT_MAX_LEN
}
fn default_time_buckets() -> usize {
    33
}
fn default_alphabet() -> usize {
    4
}
fn default_lambda() -> f64 {
    1.0
}
fn default_norm_eps() -> f64 {
    1e-5
}
fn default_init_std() -> f64 {
    0.02
}
fn default_true() -> bool {
    true
}

/// Model hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    #[serde(default = "default_dim")]
    pub dim: usize,
    #[serde(default = "default_depth")]
    pub depth: usize,
    /// Maximum events per chunk (the user token adds one position).
    #[serde(default = "default_max_len")]
    pub max_len: usize,
    /// Number of log2 time-delta buckets for the temporal attention bias.
    #[serde(default = "default_time_buckets")]
    pub time_buckets: usize,
    #[serde(default = "default_alphabet")]
    pub reason_alphabet: usize,
    #[serde(default = "default_alphabet")]
    pub interaction_alphabet: usize,
    /// Share the item head with the item embedding table.
    #[serde(default)]
    pub tie_item_head: bool,
    /// Residual add around each block.
    #[serde(default = "default_true")]
    pub residual: bool,
    /// Weight of the action loss in the total loss.
    #[serde(default = "default_lambda")]
    pub action_loss_weight: f64,
    #[serde(default = "default_norm_eps")]
    pub norm_eps: f64,
    /// Std of fresh embedding rows and head columns.
    #[serde(default = "default_init_std")]
    pub init_std: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            dim: default_dim(),
            depth: default_depth(),
            max_len: default_max_len(),
            time_buckets: default_time_buckets(),
            reason_alphabet: default_alphabet(),
            interaction_alphabet: default_alphabet(),
            tie_item_head: false,
            residual: true,
            action_loss_weight: default_lambda(),
            norm_eps: default_norm_eps(),
            init_std: default_init_std(),
        }
    }
}

impl ModelConfig {
    pub fn action_alphabet(&self) -> usize {
        self.reason_alphabet + self.interaction_alphabet
    }

    fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.max_len < 2 || self.time_buckets == 0 {
            return Err(Error::config("model: dim, max_len and time_buckets must be positive (max_len >= 2)"));
        }
        if self.action_loss_weight < 0.0 {
            return Err(Error::config("model: action_loss_weight must be >= 0"));
        }
        Ok(())
    }
}

/// Per-block learnable weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockParams {
    /// Projection f1: [d × 4d]; the output splits into U, V, Q, K.
    pub w1: Mat,
    pub b1: Vec<f64>,
    /// Pointwise transformation f2: [d × d].
    pub w2: Mat,
    pub b2: Vec<f64>,
    /// Layer-norm scale/shift at the Norm site.
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
}

/// All learnable parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HstuParams {
    pub item_embedding: Mat,
    pub user_embedding: Mat,
    pub reason_embedding: Mat,
    pub type_embedding: Mat,
    pub blocks: Vec<BlockParams>,
    /// Relative-position bias, indexed by i − j in [0, max_len].
    pub rab_pos: Vec<f64>,
    /// Temporal bias over log2 time-delta buckets.
    pub rab_time: Vec<f64>,
    pub final_gamma: Vec<f64>,
    pub final_beta: Vec<f64>,
    /// [d × vocab]; `None` when tied to the item embedding.
    pub item_head: Option<Mat>,
    /// [d × (reason_alphabet + interaction_alphabet)].
    pub action_head: Mat,
}

impl HstuParams {
    /// Every tensor's backing slice, in a fixed order shared with
    /// [`HstuParams::slices_mut`].
    pub fn slices(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = vec![
            &self.item_embedding.data,
            &self.user_embedding.data,
            &self.reason_embedding.data,
            &self.type_embedding.data,
        ];
        for b in &self.blocks {
            out.push(&b.w1.data);
            out.push(&b.b1);
            out.push(&b.w2.data);
            out.push(&b.b2);
            out.push(&b.gamma);
            out.push(&b.beta);
        }
        out.push(&self.rab_pos);
        out.push(&self.rab_time);
        out.push(&self.final_gamma);
        out.push(&self.final_beta);
        if let Some(h) = &self.item_head {
            out.push(&h.data);
        }
        out.push(&self.action_head.data);
        out
    }

    pub fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = vec![
            &mut self.item_embedding.data,
            &mut self.user_embedding.data,
            &mut self.reason_embedding.data,
            &mut self.type_embedding.data,
        ];
        for b in &mut self.blocks {
            out.push(&mut b.w1.data);
            out.push(&mut b.b1);
            out.push(&mut b.w2.data);
            out.push(&mut b.b2);
            out.push(&mut b.gamma);
            out.push(&mut b.beta);
        }
        out.push(&mut self.rab_pos);
        out.push(&mut self.rab_time);
        out.push(&mut self.final_gamma);
        out.push(&mut self.final_beta);
        if let Some(h) = &mut self.item_head {
            out.push(&mut h.data);
        }
        out.push(&mut self.action_head.data);
        out
    }

    /// Human-readable tensor names aligned with [`HstuParams::slices`].
    pub fn tensor_names(&self) -> Vec<String> {
        let mut out = vec![
            "item_embedding".to_string(),
            "user_embedding".to_string(),
            "reason_embedding".to_string(),
            "type_embedding".to_string(),
        ];
        for i in 0..self.blocks.len() {
            for t in ["w1", "b1", "w2", "b2", "gamma", "beta"] {
                out.push(format!("block{i}.{t}"));
            }
        }
        out.extend(["rab_pos", "rab_time", "final_gamma", "final_beta"].map(String::from));
        if self.item_head.is_some() {
            out.push("item_head".to_string());
        }
        out.push("action_head".to_string());
        out
    }

    /// A parameter record of the same shapes, filled with zeros. Used as the
    /// gradient record and as optimizer state.
    pub fn zeros_like(&self) -> HstuParams {
        let mut out = self.clone();
        for s in out.slices_mut() {
            s.iter_mut().for_each(|x| *x = 0.0);
        }
        out
    }

    pub fn num_parameters(&self) -> usize {
        self.slices().iter().map(|s| s.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.slices().iter().all(|s| s.iter().all(|x| x.is_finite()))
    }

    /// Elementwise `self += c * other` over every tensor.
    pub fn axpy(&mut self, c: f64, other: &HstuParams) {
        let other_slices: Vec<&[f64]> = other.slices();
        for (dst, src) in self.slices_mut().into_iter().zip(other_slices) {
            for (d, s) in dst.iter_mut().zip(src.iter()) {
                *d += c * s;
            }
        }
    }

    pub fn scale(&mut self, c: f64) {
        for s in self.slices_mut() {
            s.iter_mut().for_each(|x| *x *= c);
        }
    }
}

/// The full model: hyperparameters plus parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HstuModel {
    pub cfg: ModelConfig,
    pub params: HstuParams,
}

impl HstuModel {
    /// Fresh model with `vocab` items and `num_users` users.
    pub fn new(cfg: ModelConfig, vocab: usize, num_users: usize, rng: &mut impl Rng) -> Result<HstuModel> {
        cfg.validate()?;
        if vocab == 0 || num_users == 0 {
            return Err(Error::config("model: vocab and num_users must be positive"));
        }
        let d = cfg.dim;
        let w_std = 1.0 / (d as f64).sqrt();
        let blocks = (0..cfg.depth)
            .map(|_| BlockParams {
                w1: Mat::randn(d, 4 * d, w_std, rng),
                b1: vec![0.0; 4 * d],
                w2: Mat::randn(d, d, w_std, rng),
                b2: vec![0.0; d],
                gamma: vec![1.0; d],
                beta: vec![0.0; d],
            })
            .collect();
        let item_head = if cfg.tie_item_head {
            None
        } else {
            Some(Mat::randn(d, vocab, cfg.init_std, rng))
        };
        let params = HstuParams {
            item_embedding: Mat::randn(vocab, d, cfg.init_std, rng),
            user_embedding: Mat::randn(num_users, d, cfg.init_std, rng),
            reason_embedding: Mat::randn(cfg.reason_alphabet, d, cfg.init_std, rng),
            type_embedding: Mat::randn(cfg.interaction_alphabet, d, cfg.init_std, rng),
            blocks,
            rab_pos: vec![0.0; cfg.max_len + 1],
            rab_time: vec![0.0; cfg.time_buckets],
            final_gamma: vec![1.0; d],
            final_beta: vec![0.0; d],
            item_head,
            action_head: Mat::randn(d, cfg.action_alphabet(), cfg.init_std, rng),
        };
        Ok(HstuModel { cfg, params })
    }

    pub fn vocab(&self) -> usize {
        self.params.item_embedding.rows
    }

    pub fn num_users(&self) -> usize {
        self.params.user_embedding.rows
    }

    /// Grows the item tables to `vocab` rows; new rows are N(0, init_std²).
    pub fn register_items(&mut self, vocab: usize, rng: &mut impl Rng) {
        if vocab <= self.vocab() {
            return;
        }
        let add = vocab - self.vocab();
        self.params.item_embedding.grow_rows(add, self.cfg.init_std, rng);
        if let Some(head) = &mut self.params.item_head {
            head.grow_cols(add, self.cfg.init_std, rng);
        }
    }

    /// Grows the user table to `num_users` rows.
    pub fn register_users(&mut self, num_users: usize, rng: &mut impl Rng) {
        if num_users <= self.num_users() {
            return;
        }
        let add = num_users - self.num_users();
        self.params.user_embedding.grow_rows(add, self.cfg.init_std, rng);
    }

    /// Item-head column `c` (tied models read the embedding row).
    pub fn item_head_col(&self, c: usize) -> ItemHeadCol<'_> {
        match &self.params.item_head {
            Some(h) => ItemHeadCol { mat: h, col: c, tied: false },
            None => ItemHeadCol { mat: &self.params.item_embedding, col: c, tied: true },
        }
    }

    /// Score of item `c` for hidden state `h` (without the flop tally;
    /// callers tally in bulk).
    pub fn item_score(&self, h: &[f64], c: usize) -> f64 {
        match &self.params.item_head {
            Some(head) => h.iter().enumerate().map(|(i, &x)| x * head.at(i, c)).sum(),
            None => h.iter().zip(self.params.item_embedding.row(c)).map(|(x, y)| x * y).sum(),
        }
    }
}

/// Borrowed view of one item-head column.
pub struct ItemHeadCol<'a> {
    mat: &'a Mat,
    col: usize,
    tied: bool,
}

impl ItemHeadCol<'_> {
    pub fn get(&self, i: usize) -> f64 {
        if self.tied {
            self.mat.at(self.col, i)
        } else {
            self.mat.at(i, self.col)
        }
    }
}

/// SiLU activation x·σ(x).
#[inline]
pub fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

/// Derivative of SiLU: σ(x)·(1 + x·(1 − σ(x))).
#[inline]
pub fn silu_prime(x: f64) -> f64 {
    let s = 1.0 / (1.0 + (-x).exp());
    s * (1.0 + x * (1.0 - s))
}

/// Log2 bucket of a time delta: ⌊log2(1 + Δt/60s)⌋, capped.
#[inline]
pub fn time_bucket(delta_secs: i64, buckets: usize) -> usize {
    let q = (delta_secs.max(0) as u64) / 60;
    ((q + 1).ilog2() as usize).min(buckets - 1)
}
