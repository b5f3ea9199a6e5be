//! Extraction, compression and auditing of geometric structure hidden in
//! frozen layer x head weight tensors.
//!
//! The pipeline has three stages: a fixed feature operator read from the
//! tensor (drift map, single head, compact sum, low-rank or sparse
//! surrogate), a small learned linear adaptor mapping operator features to a
//! low-dimensional latent whose scaled angular distances are trained to
//! match target distances, and task readouts on top of the latent. Around
//! that sit quality gates, a donor-holdout benchmark harness, factor
//! ablation machinery, geometric audits, and a synthetic generator with
//! planted structure that makes every pipeline claim checkable at desk
//! scale.

pub mod adaptor;
// pub mod audits;
// pub mod compaction;
pub mod container;
pub mod error;
// pub mod harness;
pub mod linalg;
// pub mod manifest;
pub mod metrics;
pub mod operator;
pub mod panel;
pub mod rng;
pub mod stats;
pub mod synth;

pub use error::{ForgeError, Result};
