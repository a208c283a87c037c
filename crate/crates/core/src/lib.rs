//! Generalized decision transformers for hindsight information matching.
//!
//! The crate trains statistic-conditioned policies by behavioral cloning on
//! offline trajectory data. Each trajectory is relabeled with an anti-causal
//! statistic of its own future (returns-to-go, terminal goals, categorical
//! feature histograms, or the raw state sequence), a causally-masked
//! transformer is trained to predict actions conditioned on that statistic,
//! and rollouts are scored against target feature distributions with a
//! discrete Wasserstein-1 metric.
//!
//! Module map:
//! - [`dataset`]: trajectory storage, JSON-lines IO, holdout splits, feature
//!   extraction, and bin specifications.
//! - [`stats`]: the hindsight statistics themselves.
//! - [`autodiff`]: a small reverse-mode engine over 2-D `f64` arrays.
//! - [`model`]: the conditioned transformer, its aggregators, and the
//!   learned-feature encoders.
//! - [`trainer`]: batch sampling and the optimization loop.
//! - [`envsim`]: deterministic point-velocity environments and scripted
//!   dataset/target generators.
//! - [`eval`]: rollouts, empirical distributions, Wasserstein-1, reports.
//! - [`cli`]: the `gdt` command-line pipeline.

pub mod autodiff;
pub mod cli;
pub mod dataset;
pub mod envsim;
pub mod eval;
pub mod model;
pub mod stats;
pub mod trainer;
