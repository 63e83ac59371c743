//! Sequence-modeling laboratory built around attention memories that learn
//! when to expire.
//!
//! A decoder-only transformer caches one memory per timestep per layer. Each
//! memory gets a learned lifetime; a linear ramp takes its attention weight
//! to exactly zero, after which the entry is deleted for good. The crate
//! bundles the mechanism, a fixed-span baseline, synthetic memory tasks
//! (copy, colliding particles, char-level LM), a tiny f64 autodiff engine
//! that the whole model trains on, and instrumentation for memory size and
//! time per batch.
//!
//! Entry points:
//! - library: [`model::Model`], [`train::train_loop`], [`tasks`]
//! - examples/ directory: one runnable program per capability
//! - `expire-span` binary: `train`, `eval`, `analyze`, `selftest` subcommands

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod error;
pub mod expire;
pub mod metrics;
pub mod model;
pub mod rng;
pub mod selftest;
pub mod tasks;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
