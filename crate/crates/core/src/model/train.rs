//! Adam training loop over sequence chunks.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::chunk::SequenceChunk;
use crate::error::{Error, Result};
use crate::model::{backward, HstuModel, LossMode};

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}
fn default_negatives() -> usize {
    64
}
fn default_batch() -> usize {
    8
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    #[serde(default = "default_beta1")]
    pub adam_beta1: f64,
    #[serde(default = "default_beta2")]
    pub adam_beta2: f64,
    #[serde(default = "default_eps")]
    pub adam_eps: f64,
    #[serde(default = "default_negatives")]
    pub negative_samples: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    pub seed: u64,
}

impl TrainConfig {
    fn validate(&self) -> Result<()> {
        if self.learning_rate <= 0.0 {
            return Err(Error::config("train: learning_rate must be > 0"));
        }
        if self.negative_samples == 0 {
            return Err(Error::config("train: negative_samples must be >= 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("train: batch_size must be >= 1"));
        }
        Ok(())
    }
}

/// Trains in place; returns the per-epoch mean total loss.
///
/// Chunk order is shuffled per epoch from the config seed, so two runs with
/// the same seed produce identical parameters.
pub fn train(chunks: &[SequenceChunk], model: &mut HstuModel, cfg: &TrainConfig) -> Result<Vec<f64>> {
    cfg.validate()?;
    if chunks.is_empty() {
        return Err(Error::data("train: empty chunk set"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut m = model.params.zeros_like();
    let mut v = model.params.zeros_like();
    let mut step = 0u64;
    let mut trace = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..chunks.len()).collect();
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let mut acc = model.params.zeros_like();
            for &ci in batch {
                let (lb, grads) = backward(
                    &chunks[ci],
                    model,
                    LossMode::Training { negatives: cfg.negative_samples },
                    &mut rng,
                )
                .map_err(|e| match e {
                    Error::Numerical(msg) => {
                        Error::Numerical(format!("{msg} (epoch {epoch}, step {step})"))
                    }
                    other => other,
                })?;
                epoch_loss += lb.total;
                acc.axpy(1.0, &grads);
            }
            acc.scale(1.0 / batch.len() as f64);
            step += 1;
            adam_step(model, &acc, &mut m, &mut v, step, cfg);
            if !model.params.all_finite() {
                return Err(Error::numerical(format!(
                    "divergence: non-finite parameters after epoch {epoch}, step {step}"
                )));
            }
        }
        trace.push(epoch_loss / chunks.len() as f64);
    }
    Ok(trace)
}

fn adam_step(
    model: &mut HstuModel,
    grads: &super::HstuParams,
    m: &mut super::HstuParams,
    v: &mut super::HstuParams,
    step: u64,
    cfg: &TrainConfig,
) {
    let (b1, b2) = (cfg.adam_beta1, cfg.adam_beta2);
    let bias1 = 1.0 - b1.powi(step as i32);
    let bias2 = 1.0 - b2.powi(step as i32);
    let gs = grads.slices();
    let ms = m.slices_mut();
    let vs = v.slices_mut();
    let ps = model.params.slices_mut();
    for (((p, g), mt), vt) in ps.into_iter().zip(gs).zip(ms).zip(vs) {
        for i in 0..p.len() {
            mt[i] = b1 * mt[i] + (1.0 - b1) * g[i];
            vt[i] = b2 * vt[i] + (1.0 - b2) * g[i] * g[i];
            let mhat = mt[i] / bias1;
            let vhat = vt[i] / bias2;
            p[i] -= cfg.learning_rate * mhat / (vhat.sqrt() + cfg.adam_eps);
        }
    }
}
