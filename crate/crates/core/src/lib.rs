//! Continual-adaptation testbed for a toy HSTU sequential recommender.
//!
//! The crate is organized around the stages of the pipeline:
//!
//! - [`stream`] — synthetic drifting interaction stream generation and I/O
//! - [`chunk`] — fixed-length user-history chunking
//! - [`model`] — the HSTU recommender with exact manual backpropagation
//! - [`metrics`] — next-item ranking metrics (NDCG@K, HR@K, MRR)
//! - [`repr`] — chunk representations (token bag / hidden states / gradients)
//! - [`select`] — reference-set scoring and the sampling strategies
//! - [`protocol`] — the rolling pretrain/select/update/evaluate harness
//! - [`flops`] — analytic selection-cost formulas and empirical op tallies

pub mod chunk;
pub mod error;
pub mod flops;
pub mod metrics;
pub mod model;
pub mod protocol;
pub mod repr;
pub mod select;
pub mod stream;
pub mod tensor;

pub use error::{Error, Result};
