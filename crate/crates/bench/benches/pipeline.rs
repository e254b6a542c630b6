//! Criterion benchmarks for the hot paths of the pipeline: the model's
//! forward and backward passes, representation extraction, pool scoring and
//! sampling, and stream generation.

use chrono::NaiveDate;
use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use driftsel_bench::{bench_chunk, bench_model};
use driftsel_core::chunk::ChunkId;
use driftsel_core::model::{backward, forward, LossMode};
use driftsel_core::repr::{extract, ReprKind};
use driftsel_core::select::{
    sample_diverse_weighted, sample_knn_weighted, score_pool, ScoredPool,
};
use driftsel_core::stream::{generate_stream, WorldConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn bench_forward(c: &mut Criterion) {
    let model = bench_model(1);
    let chunk = bench_chunk(2, 100);
    c.bench_function("forward_100_events", |b| {
        b.iter(|| forward(std::hint::black_box(&chunk), &model).unwrap())
    });
}

fn bench_backward(c: &mut Criterion) {
    let model = bench_model(3);
    let chunk = bench_chunk(4, 100);
    c.bench_function("backward_100_events", |b| {
        b.iter_batched(
            || ChaCha8Rng::seed_from_u64(7),
            |mut rng| {
                backward(
                    std::hint::black_box(&chunk),
                    &model,
                    LossMode::Training { negatives: 64 },
                    &mut rng,
                )
                .unwrap()
            },
            BatchSize::SmallInput,
        )
    });
}

fn bench_representations(c: &mut Criterion) {
    let model = bench_model(5);
    let chunk = bench_chunk(6, 100);
    for kind in [ReprKind::TokenBag, ReprKind::RepSim, ReprKind::GradSim] {
        c.bench_function(&format!("extract_{kind}"), |b| {
            b.iter(|| extract(std::hint::black_box(&chunk), &model, kind).unwrap())
        });
    }
}

fn scored_pool(n: usize, seed: u64) -> (ScoredPool, Vec<driftsel_core::repr::ReprVector>) {
    let model = bench_model(seed);
    let reprs: Vec<_> = (0..n)
        .map(|i| extract(&bench_chunk(1000 + i as u64, 40), &model, ReprKind::RepSim).unwrap())
        .collect();
    let refs: Vec<_> = (0..20)
        .map(|i| extract(&bench_chunk(5000 + i as u64, 40), &model, ReprKind::RepSim).unwrap())
        .collect();
    let scores = score_pool(&reprs, &refs).unwrap();
    let pool = ScoredPool {
        ids: (0..n as u32).map(|u| ChunkId { user: u, index: 0 }).collect(),
        scores,
        reprs,
    };
    (pool, refs)
}

fn bench_selection(c: &mut Criterion) {
    let (pool, refs) = scored_pool(200, 8);
    c.bench_function("score_pool_200x20", |b| {
        b.iter(|| score_pool(std::hint::black_box(&pool.reprs), &refs).unwrap())
    });
    c.bench_function("knn_weighted_200_k40", |b| {
        b.iter_batched(
            || ChaCha8Rng::seed_from_u64(9),
            |mut rng| sample_knn_weighted(&pool, 40, 10, 9, &mut rng).unwrap(),
            BatchSize::SmallInput,
        )
    });
    c.bench_function("diverse_weighted_200_k40_b16", |b| {
        b.iter_batched(
            || ChaCha8Rng::seed_from_u64(10),
            |mut rng| sample_diverse_weighted(&pool, 40, 16, &mut rng).unwrap(),
            BatchSize::SmallInput,
        )
    });
}

fn bench_stream(c: &mut Criterion) {
    let cfg = WorldConfig {
        num_users: 200,
        initial_catalog: 500,
        topics: 8,
        drift_rate: 0.3,
        new_items_per_month: 5,
        new_users_per_month: 2,
        events_per_user_per_month: 20.0,
        seed: 11,
        zipf_exponent: 1.0,
        reason_alphabet: 4,
        interaction_alphabet: 4,
        logit_clamp: 6.0,
    };
    let start = NaiveDate::from_ymd_opt(2022, 1, 1).unwrap();
    let end = NaiveDate::from_ymd_opt(2023, 1, 1).unwrap();
    c.bench_function("generate_stream_200u_12mo", |b| {
        b.iter(|| generate_stream(std::hint::black_box(&cfg), start, end).unwrap())
    });
}

criterion_group!(
    benches,
    bench_forward,
    bench_backward,
    bench_representations,
    bench_selection,
    bench_stream
);
criterion_main!(benches);
