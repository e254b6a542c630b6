//! FLOPs accounting: analytic selection/training cost formulas plus an
//! empirical multiply-add tally incremented by the numeric kernels.
//!
//! The tally is a per-thread counter; workers each accumulate their own total
//! and callers merge the numbers at job end.

use std::cell::Cell;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

thread_local! {
    static TALLY: Cell<u64> = const { Cell::new(0) };
}

/// Adds `n` multiply-add operations to the current thread's tally.
#[inline]
pub fn tally(n: u64) {
    TALLY.with(|t| t.set(t.get() + n));
}

/// Current thread's tally.
pub fn tally_total() -> u64 {
    TALLY.with(|t| t.get())
}

/// Resets the current thread's tally to zero.
pub fn tally_reset() {
    TALLY.with(|t| t.set(0));
}

/// Runs `f` and returns its result together with the ops it tallied.
pub fn counted<T>(f: impl FnOnce() -> T) -> (T, u64) {
    let before = tally_total();
    let out = f();
    (out, tally_total() - before)
}

/// Inputs to the analytic per-interval selection-cost formulas.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CostModel {
    /// FLOPs for one forward pass through the model.
    pub f_fwd: f64,
    /// FLOPs for one backward pass; defaults to 2·f_fwd.
    pub f_bwd: f64,
    /// Dimensionality of the model-based (hidden-state) representation.
    pub d_rep: usize,
    /// Dimensionality of the gradient representation.
    pub d_grad: usize,
    /// Candidate pool size.
    pub n: usize,
    /// Reference set size.
    pub r: usize,
    /// Selection budget.
    pub k: usize,
    /// Training epochs per update.
    pub epochs: usize,
}

impl CostModel {
    pub fn new(f_fwd: f64, d_rep: usize, d_grad: usize, n: usize, r: usize, k: usize, epochs: usize) -> Self {
        CostModel { f_fwd, f_bwd: 2.0 * f_fwd, d_rep, d_grad, n, r, k, epochs }
    }

    fn validate(&self) -> Result<()> {
        if self.f_fwd <= 0.0 || self.f_bwd <= 0.0 {
            return Err(Error::config("cost model: f_fwd and f_bwd must be positive"));
        }
        Ok(())
    }
}

/// Selection methods with an analytic cost formula.
///
/// `TokenBag` is not part of the forward/backward accounting; its cost is the
/// similarity and sort terms only.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SelectionMethod {
    Random,
    TokenBag,
    RepSim,
    GradSim,
}

impl FromStr for SelectionMethod {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "random" => Ok(SelectionMethod::Random),
            "token-bag" | "tokenbag" | "bm25" => Ok(SelectionMethod::TokenBag),
            "repsim" => Ok(SelectionMethod::RepSim),
            "gradsim" => Ok(SelectionMethod::GradSim),
            other => Err(Error::config(format!("unknown selection method `{other}`"))),
        }
    }
}

/// Analytic FLOPs to score and rank the pool for one interval.
///
/// Random: 0. RepSim: (n+r)·F_fwd + n·r·d_rep + n·log2 n.
/// GradSim: (n+r)·(F_fwd+F_bwd) + n·r·d_grad + n·log2 n.
pub fn select_flops(method: SelectionMethod, cm: &CostModel) -> Result<f64> {
    cm.validate()?;
    let n = cm.n as f64;
    let r = cm.r as f64;
    let sort = if cm.n > 1 { n * n.log2() } else { 0.0 };
    Ok(match method {
        SelectionMethod::Random => 0.0,
        SelectionMethod::TokenBag => n * r * cm.d_rep as f64 + sort,
        SelectionMethod::RepSim => (n + r) * cm.f_fwd + n * r * cm.d_rep as f64 + sort,
        SelectionMethod::GradSim => {
            (n + r) * (cm.f_fwd + cm.f_bwd) + n * r * cm.d_grad as f64 + sort
        }
    })
}

/// Analytic FLOPs to train on `k` samples: k · epochs · (F_fwd + F_bwd).
pub fn train_flops(k: usize, cm: &CostModel) -> f64 {
    k as f64 * cm.epochs as f64 * (cm.f_fwd + cm.f_bwd)
}

/// Per-interval FLOPs columns, emitted inside each interval report.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FlopsReport {
    pub method: String,
    pub n: usize,
    pub r: usize,
    pub select_flops: f64,
    pub train_flops: f64,
    pub total: f64,
    /// Ratio of this method's selection cost to the RepSim cost under the
    /// same cost model.
    pub relative_to_repsim: f64,
    /// Multiply-adds actually counted during the interval.
    pub counted: u64,
}

impl FlopsReport {
    pub fn build(method: SelectionMethod, cm: &CostModel, counted: u64) -> Result<FlopsReport> {
        let sel = select_flops(method, cm)?;
        let train = train_flops(cm.k, cm);
        let rep = select_flops(SelectionMethod::RepSim, cm)?;
        Ok(FlopsReport {
            method: format!("{method:?}"),
            n: cm.n,
            r: cm.r,
            select_flops: sel,
            train_flops: train,
            total: sel + train,
            relative_to_repsim: if rep > 0.0 { sel / rep } else { 0.0 },
            counted,
        })
    }
}
