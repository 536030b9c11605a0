// SPDX-License-Identifier: MIT OR Apache-2.0

//! Nonparametric change-point detection in regression.
//!
//! The detector scans a time-ordered regression dataset with symmetric
//! windows of several sizes, scoring each candidate split by the gain in
//! Gaussian-process marginal likelihood from modelling the two half-windows
//! separately rather than jointly. Critical levels are calibrated by a
//! residual sign-flip bootstrap with an exact min-p multiplicity correction,
//! and detected breaks are localized and removed recursively.

#![forbid(unsafe_code)]

pub mod calibrate;
pub mod config;
pub mod dataset;
pub mod detect;
pub mod error;
pub mod experiments;
pub mod gp;
pub mod kernel;
pub mod report;
mod rng;
pub mod scan;

pub use error::{Error, Result};

/// Runs `f` inside a worker pool capped at `threads` (all available cores
/// when `None`). Every parallel stage writes to index-addressed slots, so the
/// cap changes throughput only, never results.
pub fn with_thread_cap<T: Send>(threads: Option<usize>, f: impl FnOnce() -> T + Send) -> T {
    match threads {
        None => f(),
        Some(t) => rayon::ThreadPoolBuilder::new()
            .num_threads(t.max(1))
            .build()
            .expect("worker pool construction")
            .install(f),
    }
}
