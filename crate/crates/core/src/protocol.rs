//! Continual-update protocol: pretrain on a history prefix, then walk a grid
//! of fixed-length intervals, each time scoring a pool of fresh chunks,
//! selecting a training subset under a budget, updating the model, and
//! evaluating on the following interval.
//!
//! Temporal hygiene invariant: a chunk id enters at most one training pool,
//! ever. Pools at interval t contain only chunks whose last event lies in t
//! and whose id was never pooled before (including pretraining). The
//! evaluation set of step t is exactly the pool of step t+1, so no arm is
//! ever evaluated on data any arm has already trained on at that point.
//!
//! Every random decision draws from an rng derived from (purpose, arm,
//! interval, seed), so a run is reproducible and arms share growth and
//! reference draws exactly.

use std::collections::BTreeSet;

use chrono::NaiveDate;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::chunk::{chunk_events, ChunkId, SequenceChunk, DEFAULT_MAX_LEN};
use crate::error::{Error, Result};
use crate::flops::{counted, CostModel, FlopsReport, SelectionMethod};
use crate::metrics::{evaluate, MetricsReport};
use crate::model::{analytic_hidden_flops, train, HstuModel, ModelConfig, TrainConfig};
use crate::repr::{extract, ReprKind, ReprVector};
use crate::select::{
    score_pool, select, ScoredPool, SelectionOutcome, SelectionPlan, Strategy,
};
use crate::stream::{add_months, month_index, timestamp, EventStream};

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Deterministic seed for one (purpose, arm, interval) stream of a run.
pub fn derive_seed(base: u64, purpose: &str, arm: u64, interval: u64) -> u64 {
    let mut h = base;
    for &b in purpose.as_bytes() {
        h = splitmix64(h ^ b as u64);
    }
    splitmix64(splitmix64(h ^ arm) ^ interval)
}

fn default_interval_months() -> u32 {
    6
}
fn default_ref_size() -> usize {
    100
}
fn default_budget() -> f64 {
    0.2
}
fn default_max_chunk_len() -> usize {
    DEFAULT_MAX_LEN
}
fn default_eval_k() -> Vec<usize> {
    vec![10, 50]
}
fn default_primary_k() -> usize {
    50
}

/// Protocol-level settings shared by every arm.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProtocolConfig {
    /// Exclusive end of the pretraining window; also the interval-grid origin.
    pub pretrain_end: NaiveDate,
    #[serde(default = "default_interval_months")]
    pub interval_months: u32,
    /// Number of update steps. The stream must extend one interval further
    /// for the final evaluation.
    pub horizon: u32,
    /// Reference chunks drawn from the final month of each interval.
    #[serde(default = "default_ref_size")]
    pub ref_size: usize,
    /// Selection budget as a fraction of the pool.
    #[serde(default = "default_budget")]
    pub budget: f64,
    #[serde(default = "default_max_chunk_len")]
    pub max_chunk_len: usize,
    #[serde(default = "default_eval_k")]
    pub eval_k: Vec<usize>,
    /// Cutoff used for summary comparisons between arms.
    #[serde(default = "default_primary_k")]
    pub primary_k: usize,
    pub seed: u64,
    /// Pretraining settings; the seed field is replaced by a derived stream.
    pub pretrain: TrainConfig,
    /// Per-interval update settings; the seed field is likewise derived.
    pub update: TrainConfig,
}

impl ProtocolConfig {
    pub fn validate(&self) -> Result<()> {
        if self.horizon == 0 {
            return Err(Error::config("protocol: horizon must be >= 1"));
        }
        if !(0.0 < self.budget && self.budget <= 1.0) {
            return Err(Error::config("protocol: budget must lie in (0, 1]"));
        }
        if self.ref_size == 0 {
            return Err(Error::config("protocol: ref_size must be >= 1"));
        }
        if !self.eval_k.contains(&self.primary_k) {
            return Err(Error::config("protocol: primary_k must appear in eval_k"));
        }
        Ok(())
    }

    /// Interval-grid boundary `b`: the first day after `b` intervals.
    pub fn boundary(&self, b: u32) -> NaiveDate {
        add_months(self.pretrain_end, (self.interval_months * b) as i32)
    }
}

/// How one arm updates (or refuses to update) at each interval.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case", deny_unknown_fields)]
pub enum ArmMode {
    /// Frozen model; evaluation only.
    None,
    /// Train on the entire pool every interval.
    Full,
    /// Score, sample under the budget, train on the subset.
    Select {
        /// Representation for scoring; may be omitted for score-free
        /// strategies (random).
        #[serde(default, skip_serializing_if = "Option::is_none")]
        repr: Option<ReprKind>,
        strategy: Strategy,
        /// Overrides the protocol-level budget when set.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        budget: Option<f64>,
        /// Overrides the protocol-level reference size when set.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        ref_size: Option<usize>,
    },
}

/// A named competitor in the protocol run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmSpec {
    pub name: String,
    #[serde(flatten)]
    pub mode: ArmMode,
}

impl ArmSpec {
    pub fn none(name: &str) -> Self {
        ArmSpec { name: name.into(), mode: ArmMode::None }
    }
    pub fn full(name: &str) -> Self {
        ArmSpec { name: name.into(), mode: ArmMode::Full }
    }
    pub fn random(name: &str) -> Self {
        ArmSpec {
            name: name.into(),
            mode: ArmMode::Select { repr: None, strategy: Strategy::Random, budget: None, ref_size: None },
        }
    }
    pub fn select(name: &str, repr: ReprKind, strategy: Strategy) -> Self {
        ArmSpec {
            name: name.into(),
            mode: ArmMode::Select { repr: Some(repr), strategy, budget: None, ref_size: None },
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let ArmMode::Select { repr, strategy, budget, .. } = &self.mode {
            if repr.is_none() && *strategy != Strategy::Random {
                return Err(Error::config(format!(
                    "arm {}: strategy {} needs a repr",
                    self.name, strategy
                )));
            }
            if let Some(b) = budget {
                if !(0.0 < *b && *b <= 1.0) {
                    return Err(Error::config(format!("arm {}: budget must lie in (0, 1]", self.name)));
                }
            }
        }
        Ok(())
    }
}

/// Shared per-interval data: pool, reference candidates, evaluation set.
#[derive(Debug, Clone)]
pub struct IntervalData {
    pub t: u32,
    pub pool: Vec<SequenceChunk>,
    /// Pool chunks ending in the interval's final month (reference candidates).
    pub ref_candidates: Vec<SequenceChunk>,
    /// Pool of step t+1; never trained on before its own step.
    pub eval: Vec<SequenceChunk>,
}

/// Pretraining chunks plus one [`IntervalData`] per update step.
#[derive(Debug, Clone)]
pub struct StagedData {
    pub pretrain: Vec<SequenceChunk>,
    pub intervals: Vec<IntervalData>,
}

/// Re-chunks prefixes of the stream onto the interval grid and applies the
/// never-pool-twice rule.
pub fn stage_data(stream: &EventStream, cfg: &ProtocolConfig) -> Result<StagedData> {
    cfg.validate()?;
    let cut = timestamp(cfg.pretrain_end);
    let pre: Vec<_> = stream.events.iter().copied().filter(|e| e.timestamp < cut).collect();
    if pre.is_empty() {
        return Err(Error::data("protocol: no events before pretrain_end"));
    }
    let pretrain = chunk_events(&pre, cfg.max_chunk_len);
    let mut used: BTreeSet<ChunkId> = pretrain.iter().map(|c| c.id).collect();

    // Pools for steps 0..horizon plus one extra for the final evaluation.
    let mut pools: Vec<Vec<SequenceChunk>> = Vec::new();
    for t in 0..=cfg.horizon {
        let lo = timestamp(cfg.boundary(t));
        let hi = timestamp(cfg.boundary(t + 1));
        let prefix: Vec<_> = stream.events.iter().copied().filter(|e| e.timestamp < hi).collect();
        let mut pool: Vec<SequenceChunk> = chunk_events(&prefix, cfg.max_chunk_len)
            .into_iter()
            .filter(|c| {
                let ts = c.last_timestamp();
                ts >= lo && ts < hi && !used.contains(&c.id)
            })
            .collect();
        for c in &mut pool {
            c.source_interval = t as i64;
        }
        used.extend(pool.iter().map(|c| c.id));
        if pool.is_empty() {
            return Err(Error::data(format!("protocol: interval {t} has an empty pool")));
        }
        pools.push(pool);
    }

    let mut intervals = Vec::with_capacity(cfg.horizon as usize);
    for t in (0..cfg.horizon).rev() {
        let eval = pools.pop().expect("one pool per step plus one");
        let pool = pools.last().expect("pool for step t").clone();
        let last_month = timestamp(add_months(cfg.boundary(t + 1), -1));
        let ref_candidates: Vec<_> =
            pool.iter().filter(|c| c.last_timestamp() >= last_month).cloned().collect();
        intervals.push(IntervalData { t, pool, ref_candidates, eval });
    }
    intervals.reverse();
    Ok(StagedData { pretrain, intervals })
}

/// Uniform sample of `k` reference chunks (all of them when fewer exist).
fn sample_refs(cands: &[SequenceChunk], k: usize, seed: u64) -> Vec<SequenceChunk> {
    if cands.len() <= k {
        return cands.to_vec();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx: Vec<usize> = (0..cands.len()).collect();
    let mut out = Vec::with_capacity(k);
    for _ in 0..k {
        let pos = rng.gen_range(0..idx.len());
        out.push(cands[idx.swap_remove(pos)].clone());
    }
    out
}

/// One arm's record for one update step.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IntervalReport {
    pub interval: u32,
    pub arm: String,
    pub pool_size: usize,
    pub ref_size: usize,
    pub selected: usize,
    /// Cumulative chunks in the replay buffer after this step.
    pub replay_size: usize,
    pub loss_trace: Vec<f64>,
    /// Metrics on the following interval's chunks.
    pub metrics: MetricsReport,
    pub flops: FlopsReport,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub selection: Option<SelectionOutcome>,
}

/// One arm across the whole run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ArmReport {
    pub name: String,
    #[serde(flatten)]
    pub mode: ArmMode,
    /// Pretrained-model metrics on the first interval, before any update.
    pub initial: MetricsReport,
    pub intervals: Vec<IntervalReport>,
}

/// Full run output. Deliberately contains no wall-clock fields so two runs
/// of the same configuration serialize byte-identically.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProtocolReport {
    pub seed: u64,
    pub horizon: u32,
    pub interval_months: u32,
    pub eval_k: Vec<usize>,
    pub primary_k: usize,
    pub pretrain_chunks: usize,
    pub pretrain_loss: Vec<f64>,
    pub arms: Vec<ArmReport>,
}

impl ProtocolReport {
    pub fn arm(&self, name: &str) -> Option<&ArmReport> {
        self.arms.iter().find(|a| a.name == name)
    }
}

/// (selected − baseline) / (full − baseline) on the primary-cutoff NDCG at
/// one step; `None` when full and baseline are indistinguishable.
pub fn error_reduction(
    selected: &MetricsReport,
    baseline: &MetricsReport,
    full: &MetricsReport,
    k: usize,
) -> Option<f64> {
    let gap = full.ndcg_at(k) - baseline.ndcg_at(k);
    if gap.abs() < 1e-12 {
        return None;
    }
    Some((selected.ndcg_at(k) - baseline.ndcg_at(k)) / gap)
}

/// Catalog and user counts in force just before `date`.
fn counts_before(stream: &EventStream, date: NaiveDate) -> (usize, usize) {
    let m = month_index(stream.start, timestamp(date) - 1).max(0) as u32;
    (stream.catalog_size(m) as usize, stream.users(m) as usize)
}

fn grow_to_boundary(
    model: &mut HstuModel,
    stream: &EventStream,
    cfg: &ProtocolConfig,
    b: u32,
) {
    let (vocab, users) = counts_before(stream, cfg.boundary(b));
    // Same derived seed at every arm: fresh rows are bit-identical run-wide.
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "grow", 0, b as u64));
    model.register_items(vocab, &mut rng);
    model.register_users(users, &mut rng);
}

fn method_of(mode: &ArmMode) -> SelectionMethod {
    match mode {
        ArmMode::None | ArmMode::Full => SelectionMethod::Random,
        ArmMode::Select { repr, .. } => match repr {
            None => SelectionMethod::Random,
            Some(ReprKind::TokenBag) => SelectionMethod::TokenBag,
            Some(ReprKind::RepSim) => SelectionMethod::RepSim,
            Some(ReprKind::GradSim) => SelectionMethod::GradSim,
        },
    }
}

struct ArmState {
    spec: ArmSpec,
    model: HstuModel,
    /// Every chunk this arm has trained on since pretraining.
    replay: Vec<SequenceChunk>,
    replay_ids: BTreeSet<ChunkId>,
}

/// Runs one arm's update at step `t`. Returns the report row.
fn run_arm_step(
    state: &mut ArmState,
    data: &IntervalData,
    stream: &EventStream,
    cfg: &ProtocolConfig,
    arm_index: u64,
) -> Result<IntervalReport> {
    let t = data.t;
    let n = data.pool.len();
    let update_epochs = cfg.update.epochs;

    let (ref_size_cfg, budget) = match &state.spec.mode {
        ArmMode::Select { ref_size, budget, .. } => {
            (ref_size.unwrap_or(cfg.ref_size), budget.unwrap_or(cfg.budget))
        }
        _ => (cfg.ref_size, cfg.budget),
    };
    // Reference draw depends only on (t, requested size): arms that ask for
    // the same size see the same reference set.
    let refs = sample_refs(
        &data.ref_candidates,
        ref_size_cfg,
        derive_seed(cfg.seed, "ref", ref_size_cfg as u64, t as u64),
    );

    let mut selection = None;
    let mut loss_trace = Vec::new();
    let mut selected_chunks: Vec<SequenceChunk> = Vec::new();
    let mut sel_counted = 0u64;

    match &state.spec.mode {
        ArmMode::None => {}
        ArmMode::Full => {
            selected_chunks = data.pool.clone();
        }
        ArmMode::Select { repr, strategy, .. } => {
            let k = ((budget * n as f64).ceil() as usize).clamp(1, n);
            let (outcome_res, ops) = counted(|| -> Result<SelectionOutcome> {
                let (scores, reprs) = match repr {
                    None => (vec![0.0; n], Vec::new()),
                    Some(kind) => {
                        let pool_reprs: Vec<ReprVector> = data
                            .pool
                            .iter()
                            .map(|c| extract(c, &state.model, *kind))
                            .collect::<Result<_>>()?;
                        let ref_reprs: Vec<ReprVector> = refs
                            .iter()
                            .map(|c| extract(c, &state.model, *kind))
                            .collect::<Result<_>>()?;
                        (score_pool(&pool_reprs, &ref_reprs)?, pool_reprs)
                    }
                };
                let pool = ScoredPool {
                    ids: data.pool.iter().map(|c| c.id).collect(),
                    scores,
                    reprs,
                };
                let plan = SelectionPlan {
                    strategy: *strategy,
                    k,
                    top_fraction: 0.5,
                    clusters: 10.min(n),
                    batch: cfg.update.batch_size.max(1),
                    seed: derive_seed(cfg.seed, "select", arm_index, t as u64),
                };
                let indices = select(&pool, &plan)?;
                Ok(SelectionOutcome::from_indices(&pool, &plan, &indices))
            });
            let outcome = outcome_res?;
            sel_counted = ops;
            let by_id: std::collections::BTreeMap<ChunkId, &SequenceChunk> =
                data.pool.iter().map(|c| (c.id, c)).collect();
            selected_chunks =
                outcome.selected.iter().map(|(id, _)| by_id[id].clone()).collect();
            selection = Some(outcome);
        }
    }

    let selected_count = selected_chunks.len();
    if !selected_chunks.is_empty() {
        for c in &selected_chunks {
            if state.replay_ids.insert(c.id) {
                state.replay.push(c.clone());
            }
        }
        let train_cfg = TrainConfig {
            seed: derive_seed(cfg.seed, "train", arm_index, t as u64),
            ..cfg.update.clone()
        };
        loss_trace = train(&state.replay, &mut state.model, &train_cfg)?;
    }

    // Register items and users of the next interval, then evaluate on it.
    grow_to_boundary(&mut state.model, stream, cfg, t + 2);
    let metrics = evaluate(&data.eval, &state.model, &cfg.eval_k)?;

    let mean_len = {
        let total: usize = data.pool.iter().chain(&refs).map(|c| c.len()).sum();
        total as f64 / (n + refs.len()) as f64
    };
    let f_fwd = analytic_hidden_flops(&state.model.cfg, mean_len.round() as usize);
    let cm = CostModel::new(
        f_fwd,
        state.model.cfg.dim,
        4 * state.model.cfg.dim,
        n,
        refs.len(),
        selected_count,
        update_epochs,
    );
    let flops = FlopsReport::build(method_of(&state.spec.mode), &cm, sel_counted)?;

    Ok(IntervalReport {
        interval: t,
        arm: state.spec.name.clone(),
        pool_size: n,
        ref_size: refs.len(),
        selected: selected_count,
        replay_size: state.replay.len(),
        loss_trace,
        metrics,
        flops,
        selection,
    })
}

/// Initializes and pretrains the shared base model on the pre-cutoff chunks.
///
/// Split out from [`run_protocol`] so a caller can checkpoint the (expensive)
/// pretrained model and later resume via [`run_protocol_from`].
pub fn pretrain_base(
    stream: &EventStream,
    model_cfg: &ModelConfig,
    cfg: &ProtocolConfig,
) -> Result<(HstuModel, Vec<f64>)> {
    cfg.validate()?;
    let staged = stage_data(stream, cfg)?;
    let (vocab, users) = counts_before(stream, cfg.pretrain_end);
    let mut init_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "init", 0, 0));
    let mut base = HstuModel::new(model_cfg.clone(), vocab.max(1), users.max(1), &mut init_rng)?;
    let pretrain_cfg = TrainConfig {
        seed: derive_seed(cfg.seed, "pretrain", 0, 0),
        ..cfg.pretrain.clone()
    };
    let pretrain_loss = train(&staged.pretrain, &mut base, &pretrain_cfg)?;
    Ok((base, pretrain_loss))
}

/// Pretrains once, then walks every arm through every interval.
pub fn run_protocol(
    stream: &EventStream,
    model_cfg: &ModelConfig,
    cfg: &ProtocolConfig,
    arms: &[ArmSpec],
) -> Result<ProtocolReport> {
    let (base, pretrain_loss) = pretrain_base(stream, model_cfg, cfg)?;
    run_protocol_from(base, pretrain_loss, stream, cfg, arms)
}

/// Walks every arm through every interval starting from an already
/// pretrained base model (e.g. one restored from a checkpoint).
pub fn run_protocol_from(
    base: HstuModel,
    pretrain_loss: Vec<f64>,
    stream: &EventStream,
    cfg: &ProtocolConfig,
    arms: &[ArmSpec],
) -> Result<ProtocolReport> {
    cfg.validate()?;
    if arms.is_empty() {
        return Err(Error::config("protocol: at least one arm required"));
    }
    for a in arms {
        a.validate()?;
    }
    let staged = stage_data(stream, cfg)?;
    let mut base = base;

    // Register the first interval's arrivals before the initial evaluation.
    grow_to_boundary(&mut base, stream, cfg, 1);
    let initial = evaluate(&staged.intervals[0].pool, &base, &cfg.eval_k)?;

    let mut states: Vec<ArmState> = arms
        .iter()
        .map(|spec| ArmState {
            spec: spec.clone(),
            model: base.clone(),
            replay: Vec::new(),
            replay_ids: BTreeSet::new(),
        })
        .collect();

    let mut reports: Vec<ArmReport> = arms
        .iter()
        .map(|a| ArmReport {
            name: a.name.clone(),
            mode: a.mode.clone(),
            initial: initial.clone(),
            intervals: Vec::new(),
        })
        .collect();

    for data in &staged.intervals {
        for (ai, state) in states.iter_mut().enumerate() {
            let row = run_arm_step(state, data, stream, cfg, ai as u64)?;
            reports[ai].intervals.push(row);
        }
    }

    Ok(ProtocolReport {
        seed: cfg.seed,
        horizon: cfg.horizon,
        interval_months: cfg.interval_months,
        eval_k: cfg.eval_k.clone(),
        primary_k: cfg.primary_k,
        pretrain_chunks: staged.pretrain.len(),
        pretrain_loss,
        arms: reports,
    })
}

/// Plain-text summary: one row per (arm, interval) with the headline metric
/// and FLOPs columns.
pub fn write_summary(report: &ProtocolReport, mut w: impl std::io::Write) -> Result<()> {
    let k = report.primary_k;
    writeln!(w, "{:<24} {:>8} {:>10} {:>10} {:>14} {:>14}", "arm", "interval", "ndcg@k", "hr@k", "select_flops", "train_flops")?;
    for arm in &report.arms {
        writeln!(
            w,
            "{:<24} {:>8} {:>10.5} {:>10.5} {:>14} {:>14}",
            arm.name, "init", arm.initial.ndcg_at(k), arm.initial.hr_at(k), "-", "-"
        )?;
        for row in &arm.intervals {
            writeln!(
                w,
                "{:<24} {:>8} {:>10.5} {:>10.5} {:>14.3e} {:>14.3e}",
                arm.name,
                row.interval,
                row.metrics.ndcg_at(k),
                row.metrics.hr_at(k),
                row.flops.select_flops,
                row.flops.train_flops
            )?;
        }
    }
    Ok(())
}
