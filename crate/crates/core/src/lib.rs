//! Continual PatchCore: per-task memory banks under a fixed vector budget,
//! greedy k-center coreset subsampling, routed nearest-neighbor anomaly
//! scoring and a continual-learning evaluation harness.

mod binio;

pub mod cli;
pub mod coreset;
pub mod error;
pub mod feature;
pub mod harness;
pub mod memory;
pub mod metrics;
pub mod nn;
pub mod report;
pub mod scoring;

pub use error::{Error, Result};
