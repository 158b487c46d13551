//! Coupled importance/diversity data selection.
//!
//! A small scorer network is co-trained with a proxy classifier on a random
//! fraction of a candidate pool. The scorer's per-batch softmax weights
//! modulate the proxy's cross-entropy (importance) while the variance of
//! per-cluster mean weights is penalized (diversity); the two terms are
//! balanced by learned homoscedastic uncertainties. The trained scorer then
//! ranks every candidate and the lowest-scoring fraction of each task is kept.

pub mod dataset;
pub mod error;
pub mod fsio;
pub mod numerics;
pub mod optim;
pub mod proxy;
pub mod scorer;
pub mod objective;
pub mod pipeline;
pub mod bench;
pub mod clustering;
pub mod rng;
pub mod verify;
pub mod cli;

pub use error::{Error, Result};
