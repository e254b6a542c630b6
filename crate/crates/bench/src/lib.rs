//! Shared fixtures for the pipeline benchmarks.

use driftsel_core::chunk::{ChunkId, SequenceChunk};
use driftsel_core::model::{HstuModel, ModelConfig};
use driftsel_core::stream::InteractionEvent;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const VOCAB: usize = 500;
pub const USERS: usize = 50;

/// Default-size model (d = 32, depth 2) over the benchmark vocabulary.
pub fn bench_model(seed: u64) -> HstuModel {
    let cfg = ModelConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    HstuModel::new(cfg, VOCAB, USERS, &mut rng).unwrap()
}

/// A chunk of `events` random events for one random user.
pub fn bench_chunk(seed: u64, events: usize) -> SequenceChunk {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let user = rng.gen_range(0..USERS as u32);
    let mut ts = 1_640_000_000i64;
    let events = (0..events)
        .map(|_| {
            ts += rng.gen_range(60..40_000);
            InteractionEvent {
                user_id: user,
                item_id: rng.gen_range(0..VOCAB as u32),
                reason_end: rng.gen_range(0..4),
                interaction_type: rng.gen_range(0..4),
                timestamp: ts,
            }
        })
        .collect();
    SequenceChunk { id: ChunkId { user, index: 0 }, events, source_interval: 0 }
}
