//! Deterministic, cycle-accurate simulator of gradient-based training on
//! analog in-memory accelerators.
//!
//! A model is split into M single-layer stages, one per analog device.
//! Three execution strategies are simulated with exact clock-cycle
//! accounting: vanilla model parallelism without pipelining, a
//! synchronous pipeline, and an asynchronous pipeline whose updates use
//! stale forward signals. Device updates follow the asymmetric analog
//! SGD rule `W' = W - α·G - (α/τ)·|G| ⊙ W`.
//!
//! Entry points: [`train::run`] and friends for single runs,
//! [`config`]/[`experiment`] for config-file driven experiments, and the
//! `analog-pipeline` binary for the command line.

pub mod config;
pub mod data;
pub mod device;
pub mod error;
pub mod experiment;
pub mod linalg;
pub mod model;
pub mod rngstream;
pub mod schedule;
pub mod train;

pub use error::{Error, Result};
