//! Data selection: scoring a candidate pool against a reference set and
//! drawing a training subset.
//!
//! A chunk's score is its mean similarity to the reference representations.
//! Samplers range from deterministic top-k through score-proportional
//! sampling to cluster-stratified and diversity-penalized variants. All
//! randomness flows from the plan seed, so a selection is reproducible from
//! the plan alone.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::chunk::ChunkId;
use crate::error::{Error, Result};
use crate::repr::{similarity, CorpusStats, ReprKind, ReprVector};

/// Decouples the cluster rng stream from the sampling stream; with a single
/// cluster no clustering randomness is consumed at all.
const CLUSTER_SEED_OFFSET: u64 = 0x9e37_79b9_7f4a_7c15;

/// Sampling strategy over a scored pool.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    /// Highest scores, ties broken by smaller chunk id.
    TopK,
    /// Lowest scores, ties broken by smaller chunk id.
    BottomK,
    /// A fraction from the top, the rest from the bottom.
    TopBottomK,
    /// Score-proportional sampling without replacement.
    Weighted,
    /// K-means clusters with per-cluster weighted quotas.
    KnnWeighted,
    /// Weighted sampling with a batch-wise similarity penalty.
    DiverseWeighted,
    /// Uniform without replacement; ignores scores.
    Random,
}

impl std::str::FromStr for Strategy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Strategy> {
        match s {
            "top_k" => Ok(Strategy::TopK),
            "bottom_k" => Ok(Strategy::BottomK),
            "top_bottom_k" => Ok(Strategy::TopBottomK),
            "weighted" => Ok(Strategy::Weighted),
            "knn_weighted" => Ok(Strategy::KnnWeighted),
            "diverse_weighted" => Ok(Strategy::DiverseWeighted),
            "random" => Ok(Strategy::Random),
            other => Err(Error::config(format!("unknown strategy {other:?}"))),
        }
    }
}

impl std::fmt::Display for Strategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Strategy::TopK => "top_k",
            Strategy::BottomK => "bottom_k",
            Strategy::TopBottomK => "top_bottom_k",
            Strategy::Weighted => "weighted",
            Strategy::KnnWeighted => "knn_weighted",
            Strategy::DiverseWeighted => "diverse_weighted",
            Strategy::Random => "random",
        };
        write!(f, "{s}")
    }
}

fn default_top_fraction() -> f64 {
    0.5
}
fn default_clusters() -> usize {
    10
}
fn default_batch() -> usize {
    128
}

/// A complete, reproducible description of one selection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SelectionPlan {
    pub strategy: Strategy,
    /// Subset size.
    pub k: usize,
    /// Top share for [`Strategy::TopBottomK`].
    #[serde(default = "default_top_fraction")]
    pub top_fraction: f64,
    /// Cluster count for [`Strategy::KnnWeighted`].
    #[serde(default = "default_clusters")]
    pub clusters: usize,
    /// Batch size for [`Strategy::DiverseWeighted`].
    #[serde(default = "default_batch")]
    pub batch: usize,
    pub seed: u64,
}

/// Candidate chunks with aligned scores and (optionally) representations.
#[derive(Debug, Clone)]
pub struct ScoredPool {
    pub ids: Vec<ChunkId>,
    pub scores: Vec<f64>,
    /// Aligned with `ids`; empty when no strategy in play needs them.
    pub reprs: Vec<ReprVector>,
}

impl ScoredPool {
    pub fn len(&self) -> usize {
        self.ids.len()
    }
    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Scores every pool chunk as its mean similarity to the reference set.
///
/// Token bags are compared with BM25 over document statistics from the
/// combined pool-plus-reference corpus; dense representations use cosine.
pub fn score_pool(pool: &[ReprVector], refs: &[ReprVector]) -> Result<Vec<f64>> {
    if pool.is_empty() || refs.is_empty() {
        return Err(Error::data("score_pool: empty pool or reference set"));
    }
    let kind = pool[0].kind;
    if pool.iter().chain(refs).any(|r| r.kind != kind) {
        return Err(Error::data("score_pool: mixed representation kinds"));
    }
    let stats = if kind == ReprKind::TokenBag {
        let corpus: Vec<&ReprVector> = pool.iter().chain(refs).collect();
        Some(CorpusStats::build(&corpus)?)
    } else {
        None
    };
    let inv = 1.0 / refs.len() as f64;
    pool.iter()
        .map(|cand| {
            let mut acc = 0.0;
            for r in refs {
                acc += similarity(cand, r, stats.as_ref())?;
            }
            Ok(acc * inv)
        })
        .collect()
}

fn check_k(pool: &ScoredPool, k: usize) -> Result<()> {
    if k == 0 {
        return Err(Error::config("select: k must be >= 1"));
    }
    if k > pool.len() {
        return Err(Error::data(format!("select: k = {k} exceeds pool size {}", pool.len())));
    }
    if pool.scores.len() != pool.len() {
        return Err(Error::data("select: scores misaligned with ids"));
    }
    Ok(())
}

/// Indices sorted by score (descending when `desc`), ties by smaller chunk id.
fn sorted_indices(pool: &ScoredPool, desc: bool) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..pool.len()).collect();
    idx.sort_by(|&a, &b| {
        let ord = pool.scores[a].partial_cmp(&pool.scores[b]).expect("finite scores");
        let ord = if desc { ord.reverse() } else { ord };
        ord.then_with(|| pool.ids[a].cmp(&pool.ids[b]))
    });
    idx
}

/// Top-k by score.
pub fn sample_topk(pool: &ScoredPool, k: usize) -> Result<Vec<usize>> {
    check_k(pool, k)?;
    Ok(sorted_indices(pool, true)[..k].to_vec())
}

/// Bottom-k by score.
pub fn sample_bottomk(pool: &ScoredPool, k: usize) -> Result<Vec<usize>> {
    check_k(pool, k)?;
    Ok(sorted_indices(pool, false)[..k].to_vec())
}

/// `round(k·top_fraction)` from the top and the remainder from the bottom.
pub fn sample_top_bottom(pool: &ScoredPool, k: usize, top_fraction: f64) -> Result<Vec<usize>> {
    check_k(pool, k)?;
    if !(0.0..=1.0).contains(&top_fraction) {
        return Err(Error::config("select: top_fraction must lie in [0, 1]"));
    }
    let n_top = ((k as f64) * top_fraction).round() as usize;
    let desc = sorted_indices(pool, true);
    let mut out: Vec<usize> = desc[..n_top].to_vec();
    // The bottom share reads the same ordering from the tail, skipping
    // anything the top share already took (only possible when k ~ n).
    for &i in desc.iter().rev() {
        if out.len() == k {
            break;
        }
        if !out.contains(&i) {
            out.push(i);
        }
    }
    Ok(out)
}

/// Shifted weights: w_i = s_i − min(s) + ε, strictly positive.
fn shifted_weights(scores: &[f64], active: &[usize]) -> Vec<f64> {
    let min = active.iter().map(|&i| scores[i]).fold(f64::INFINITY, f64::min);
    active.iter().map(|&i| scores[i] - min + 1e-9).collect()
}

/// Draws one index from `active` proportionally to `weights`, removing it.
fn weighted_draw(active: &mut Vec<usize>, weights: &mut Vec<f64>, rng: &mut ChaCha8Rng) -> usize {
    let total: f64 = weights.iter().sum();
    let mut u = rng.gen::<f64>() * total;
    let mut pick = active.len() - 1;
    for (pos, w) in weights.iter().enumerate() {
        if u < *w {
            pick = pos;
            break;
        }
        u -= w;
    }
    weights.swap_remove(pick);
    active.swap_remove(pick)
}

fn weighted_from(
    pool: &ScoredPool,
    candidates: &[usize],
    k: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<usize> {
    let mut active = candidates.to_vec();
    let mut weights = shifted_weights(&pool.scores, &active);
    (0..k).map(|_| weighted_draw(&mut active, &mut weights, rng)).collect()
}

/// Score-proportional sampling without replacement.
pub fn sample_weighted(pool: &ScoredPool, k: usize, rng: &mut ChaCha8Rng) -> Result<Vec<usize>> {
    check_k(pool, k)?;
    let all: Vec<usize> = (0..pool.len()).collect();
    Ok(weighted_from(pool, &all, k, rng))
}

/// Uniform sampling without replacement.
pub fn sample_random(pool: &ScoredPool, k: usize, rng: &mut ChaCha8Rng) -> Result<Vec<usize>> {
    check_k(pool, k)?;
    let mut active: Vec<usize> = (0..pool.len()).collect();
    let mut out = Vec::with_capacity(k);
    for _ in 0..k {
        let pos = rng.gen_range(0..active.len());
        out.push(active.swap_remove(pos));
    }
    Ok(out)
}

/// Hand-rolled k-means over dense representations. Returns the cluster label
/// of every pool index. Greedy farthest-proportional seeding, 50 Lloyd
/// iterations or convergence.
fn kmeans(reprs: &[ReprVector], c: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let n = reprs.len();
    let d = reprs[0].dense.len();
    let dist2 = |a: &[f64], b: &[f64]| -> f64 {
        a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
    };

    // k-means++ seeding.
    let mut centers: Vec<Vec<f64>> = Vec::with_capacity(c);
    centers.push(reprs[rng.gen_range(0..n)].dense.clone());
    let mut best = vec![f64::INFINITY; n];
    while centers.len() < c {
        let last = centers.last().unwrap();
        for (i, r) in reprs.iter().enumerate() {
            best[i] = best[i].min(dist2(&r.dense, last));
        }
        let total: f64 = best.iter().sum();
        let next = if total <= 0.0 {
            rng.gen_range(0..n)
        } else {
            let mut u = rng.gen::<f64>() * total;
            let mut pick = n - 1;
            for (i, &w) in best.iter().enumerate() {
                if u < w {
                    pick = i;
                    break;
                }
                u -= w;
            }
            pick
        };
        centers.push(reprs[next].dense.clone());
    }

    let mut labels = vec![0usize; n];
    for _ in 0..50 {
        let mut changed = false;
        for (i, r) in reprs.iter().enumerate() {
            let mut best_c = 0;
            let mut best_d = f64::INFINITY;
            for (ci, ctr) in centers.iter().enumerate() {
                let dd = dist2(&r.dense, ctr);
                if dd < best_d {
                    best_d = dd;
                    best_c = ci;
                }
            }
            if labels[i] != best_c {
                labels[i] = best_c;
                changed = true;
            }
        }
        if !changed {
            break;
        }
        let mut sums = vec![vec![0.0; d]; c];
        let mut counts = vec![0usize; c];
        for (i, r) in reprs.iter().enumerate() {
            counts[labels[i]] += 1;
            for (s, v) in sums[labels[i]].iter_mut().zip(&r.dense) {
                *s += v;
            }
        }
        for ci in 0..c {
            if counts[ci] > 0 {
                let inv = 1.0 / counts[ci] as f64;
                centers[ci] = sums[ci].iter().map(|v| v * inv).collect();
            }
            // An emptied cluster keeps its old center.
        }
    }
    labels
}

/// Cluster-stratified weighted sampling: ⌊k/C⌋ per cluster, the remainder
/// going to the largest clusters, per-cluster deficits refilled globally.
///
/// With a single cluster this degenerates to [`sample_weighted`] exactly:
/// the clustering rng stream is never touched.
pub fn sample_knn_weighted(
    pool: &ScoredPool,
    k: usize,
    clusters: usize,
    seed: u64,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<usize>> {
    check_k(pool, k)?;
    if clusters == 0 || clusters > pool.len() {
        return Err(Error::config(format!(
            "select: clusters = {clusters} outside 1..={}",
            pool.len()
        )));
    }
    if clusters == 1 {
        return sample_weighted(pool, k, rng);
    }
    if pool.reprs.len() != pool.len() {
        return Err(Error::data("select: cluster sampling needs per-chunk representations"));
    }
    if pool.reprs[0].kind == ReprKind::TokenBag {
        return Err(Error::data("select: cluster sampling needs dense representations"));
    }

    let mut cluster_rng = ChaCha8Rng::seed_from_u64(seed ^ CLUSTER_SEED_OFFSET);
    let labels = kmeans(&pool.reprs, clusters, &mut cluster_rng);

    let mut members: Vec<Vec<usize>> = vec![Vec::new(); clusters];
    for (i, &l) in labels.iter().enumerate() {
        members[l].push(i);
    }

    // Quotas: floor share everywhere, remainder to the largest clusters
    // (ties by smaller cluster index).
    let mut quota = vec![k / clusters; clusters];
    let mut order: Vec<usize> = (0..clusters).collect();
    order.sort_by_key(|&ci| (std::cmp::Reverse(members[ci].len()), ci));
    for &ci in order.iter().take(k % clusters) {
        quota[ci] += 1;
    }

    let mut out = Vec::with_capacity(k);
    for ci in 0..clusters {
        let take = quota[ci].min(members[ci].len());
        if take > 0 {
            out.extend(weighted_from(pool, &members[ci], take, rng));
        }
    }
    // Deficits from undersized clusters are refilled from everything left.
    if out.len() < k {
        let taken: std::collections::BTreeSet<usize> = out.iter().copied().collect();
        let rest: Vec<usize> = (0..pool.len()).filter(|i| !taken.contains(i)).collect();
        out.extend(weighted_from(pool, &rest, k - out.len(), rng));
    }
    Ok(out)
}

/// Weighted sampling with a diversity penalty: after each batch, every
/// remaining candidate's score drops by its mean similarity to the batch.
///
/// With `batch >= k` exactly one batch is drawn and the result equals
/// [`sample_weighted`] bit for bit.
pub fn sample_diverse_weighted(
    pool: &ScoredPool,
    k: usize,
    batch: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<usize>> {
    check_k(pool, k)?;
    if batch == 0 {
        return Err(Error::config("select: batch must be >= 1"));
    }
    let need_reprs = batch < k;
    if need_reprs && pool.reprs.len() != pool.len() {
        return Err(Error::data("select: diverse sampling needs per-chunk representations"));
    }
    let stats = if need_reprs && pool.reprs[0].kind == ReprKind::TokenBag {
        let corpus: Vec<&ReprVector> = pool.reprs.iter().collect();
        Some(CorpusStats::build(&corpus)?)
    } else {
        None
    };

    let mut scores = pool.scores.clone();
    let mut active: Vec<usize> = (0..pool.len()).collect();
    let mut out = Vec::with_capacity(k);
    while out.len() < k {
        let take = batch.min(k - out.len());
        // The shift is reapplied over the surviving candidates so penalized
        // scores stay valid weights.
        let mut weights = shifted_weights(&scores, &active);
        let mut batch_ids = Vec::with_capacity(take);
        for _ in 0..take {
            batch_ids.push(weighted_draw(&mut active, &mut weights, rng));
        }
        out.extend(batch_ids.iter().copied());
        if out.len() >= k {
            break;
        }
        let inv = 1.0 / batch_ids.len() as f64;
        for &i in &active {
            let mut penalty = 0.0;
            for &b in &batch_ids {
                penalty += similarity(&pool.reprs[i], &pool.reprs[b], stats.as_ref())?;
            }
            scores[i] -= inv * penalty;
        }
    }
    Ok(out)
}

/// Runs the plan's strategy; returns selected pool indices.
pub fn select(pool: &ScoredPool, plan: &SelectionPlan) -> Result<Vec<usize>> {
    let mut rng = ChaCha8Rng::seed_from_u64(plan.seed);
    match plan.strategy {
        Strategy::TopK => sample_topk(pool, plan.k),
        Strategy::BottomK => sample_bottomk(pool, plan.k),
        Strategy::TopBottomK => sample_top_bottom(pool, plan.k, plan.top_fraction),
        Strategy::Weighted => sample_weighted(pool, plan.k, &mut rng),
        Strategy::KnnWeighted => {
            sample_knn_weighted(pool, plan.k, plan.clusters, plan.seed, &mut rng)
        }
        Strategy::DiverseWeighted => sample_diverse_weighted(pool, plan.k, plan.batch, &mut rng),
        Strategy::Random => sample_random(pool, plan.k, &mut rng),
    }
}

/// Record of one executed selection, for manifests and reports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionOutcome {
    pub strategy: Strategy,
    pub k: usize,
    pub seed: u64,
    /// Selected chunk ids with their pool scores, in draw order.
    pub selected: Vec<(ChunkId, f64)>,
}

impl SelectionOutcome {
    pub fn from_indices(pool: &ScoredPool, plan: &SelectionPlan, indices: &[usize]) -> Self {
        SelectionOutcome {
            strategy: plan.strategy,
            k: plan.k,
            seed: plan.seed,
            selected: indices.iter().map(|&i| (pool.ids[i], pool.scores[i])).collect(),
        }
    }
}
