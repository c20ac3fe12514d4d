//! Deterministic simulator for semi-supervised federated learning with a
//! spatial sparse mixture-of-experts task head over a frozen feature
//! extractor.
//!
//! The crate is organized around the protocol's moving parts:
//!
//! - [`tensor`]: minimal reverse-mode autodiff over dense f64 tensors,
//!   with an instrumented forward-FLOP counter.
//! - [`moe`]: the task head — experts, the resolution-agnostic spatial
//!   router, a fixed-dimension global router, and routing analysis.
//! - [`ssl`]: pseudo-label generation and client-side unsupervised
//!   training (optionally with a proximal term).
//! - [`fl`]: the federation state machine — warm-up, client sampling,
//!   weighted aggregation, soft parameter mixing, server training and
//!   evaluation.
//! - [`data`]: the synthetic multi-domain dense-prediction world and the
//!   frozen backbone.
//! - [`cost`]: exact parameter / FLOP / communication accounting.
//! - [`config`]: the flat run-configuration file format.
//! - [`gradcheck`]: finite-difference verification of the autodiff engine.
//! - [`runner`] / [`report`]: run, sweep and export entry points shared by
//!   the HTTP service and the CLI.

pub mod config;
pub mod cost;
pub mod data;
pub mod error;
pub mod fl;
pub mod gradcheck;
pub mod moe;
pub mod report;
pub mod rng;
pub mod runner;
pub mod ssl;
pub mod tensor;

pub use error::{Error, Result};
