//! Anti-causal hindsight statistics: for every timestep `t` of a trajectory,
//! a summary of its own future `t..T` that the policy is conditioned on.
//!
//! Four statistic kinds are supported: discounted returns-to-go, the terminal
//! feature (goal), per-dimension categorical histograms of the future feature
//! sequence, and the raw state suffix.

use crate::dataset::{apply_feature, BinSpec, DatasetError, FeatureEncoder, FeatureSpec, Trajectory};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum StatsError {
    #[error("gamma must be in (0, 1], got {0}")]
    BadGamma(f64),
    #[error("histogram statistics need a bin spec")]
    MissingBinSpec,
    #[error("bin spec has {spec} dims but features have {feature}")]
    DimMismatch { spec: usize, feature: usize },
    #[error(transparent)]
    Dataset(#[from] DatasetError),
}

/// Which statistic of the future a variant conditions on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StatKind {
    Return,
    Goal,
    Histogram,
    StateSequence,
}

/// The per-timestep conditioning token.
#[derive(Debug, Clone, PartialEq)]
pub enum InfoStatistic {
    /// Discounted sum of future scalar features.
    Return(f64),
    /// The trajectory's final feature, constant over timesteps.
    Goal(Vec<f64>),
    /// One simplex vector per feature dimension, each of length `B`.
    Histogram(Vec<Vec<f64>>),
    /// Start offset into the trajectory's own state sequence.
    StateSequence(usize),
}

/// Everything needed to compute statistics for one variant.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StatConfig {
    pub gamma: f64,
    pub feature_spec: FeatureSpec,
    pub bin_spec: Option<BinSpec>,
}

impl StatConfig {
    pub fn validate(&self) -> Result<(), StatsError> {
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(StatsError::BadGamma(self.gamma));
        }
        Ok(())
    }
}

/// Discounted suffix sums by backward recursion:
/// `out[t] = rewards[t] + gamma * out[t+1]`.
pub fn returns_to_go(rewards: &[f64], gamma: f64) -> Vec<f64> {
    let mut out = vec![0.0; rewards.len()];
    let mut acc = 0.0;
    for t in (0..rewards.len()).rev() {
        acc = rewards[t] + gamma * acc;
        out[t] = acc;
    }
    out
}

/// Per-dimension one-hot encoding of a feature vector under `spec`.
///
/// Out-of-range values clamp to the edge bins, so the result is always a
/// valid one-hot.
pub fn one_hot(phi: &[f64], spec: &BinSpec) -> Vec<Vec<f64>> {
    phi.iter()
        .zip(&spec.dims)
        .map(|(&v, dim)| {
            let mut row = vec![0.0; dim.bins];
            row[dim.index_of(v)] = 1.0;
            row
        })
        .collect()
}

/// Discounted categorical histograms of the future feature sequence, one per
/// timestep, each dimension treated independently.
///
/// The recursion keeps raw discounted counts,
/// `u(t) = one_hot(phi_t) + gamma * u(t+1)`, and normalizes only the emitted
/// value, which makes it equal to the direct discounted summation
/// `normalize(sum_{t' >= t} gamma^(t'-t) one_hot(phi_t'))`.
pub fn histogram_sequence(
    features: &[Vec<f64>],
    spec: &BinSpec,
    gamma: f64,
) -> Result<Vec<Vec<Vec<f64>>>, StatsError> {
    if !(gamma > 0.0 && gamma <= 1.0) {
        return Err(StatsError::BadGamma(gamma));
    }
    let n_dims = spec.n_dims();
    if let Some(f) = features.first() {
        if f.len() != n_dims {
            return Err(StatsError::DimMismatch {
                spec: n_dims,
                feature: f.len(),
            });
        }
    }
    let t_len = features.len();
    let mut counts: Vec<Vec<f64>> = spec.dims.iter().map(|d| vec![0.0; d.bins]).collect();
    let mut out = vec![Vec::new(); t_len];
    for t in (0..t_len).rev() {
        for (d, dim) in spec.dims.iter().enumerate() {
            for c in counts[d].iter_mut() {
                *c *= gamma;
            }
            counts[d][dim.index_of(features[t][d])] += 1.0;
        }
        out[t] = counts
            .iter()
            .map(|u| {
                let total: f64 = u.iter().sum();
                u.iter().map(|&x| x / total).collect()
            })
            .collect();
    }
    Ok(out)
}

/// The terminal feature `phi_T`, replicated by callers across timesteps.
pub fn goal_statistic(features: &[Vec<f64>]) -> Option<Vec<f64>> {
    features.last().cloned()
}

/// Per-trajectory, per-timestep statistics for a batch of trajectories.
pub fn compute_stats(
    trajs: &[Trajectory],
    config: &StatConfig,
    kind: StatKind,
    encoder: Option<&dyn FeatureEncoder>,
) -> Result<Vec<Vec<InfoStatistic>>, StatsError> {
    config.validate()?;
    trajs
        .iter()
        .map(|traj| compute_traj_stats(traj, config, kind, encoder))
        .collect()
}

/// Statistics for a single trajectory.
pub fn compute_traj_stats(
    traj: &Trajectory,
    config: &StatConfig,
    kind: StatKind,
    encoder: Option<&dyn FeatureEncoder>,
) -> Result<Vec<InfoStatistic>, StatsError> {
    config.validate()?;
    match kind {
        StatKind::StateSequence => Ok((0..traj.len()).map(InfoStatistic::StateSequence).collect()),
        _ => {
            let features = apply_feature(traj, &config.feature_spec, encoder)?;
            stats_of_features(&features, config, kind)
        }
    }
}

/// Statistics computed directly from a feature sequence. Used both for
/// dataset trajectories and for synthetic target sequences that have no
/// states or actions.
pub fn stats_of_features(
    features: &[Vec<f64>],
    config: &StatConfig,
    kind: StatKind,
) -> Result<Vec<InfoStatistic>, StatsError> {
    config.validate()?;
    match kind {
        StatKind::Return => {
            let scalars: Vec<f64> = features.iter().map(|f| f[0]).collect();
            Ok(returns_to_go(&scalars, config.gamma)
                .into_iter()
                .map(InfoStatistic::Return)
                .collect())
        }
        StatKind::Goal => {
            let goal = goal_statistic(features).unwrap_or_default();
            Ok(vec![InfoStatistic::Goal(goal); features.len()])
        }
        StatKind::Histogram => {
            let spec = config.bin_spec.as_ref().ok_or(StatsError::MissingBinSpec)?;
            Ok(histogram_sequence(features, spec, config.gamma)?
                .into_iter()
                .map(InfoStatistic::Histogram)
                .collect())
        }
        StatKind::StateSequence => Ok((0..features.len()).map(InfoStatistic::StateSequence).collect()),
    }
}

/// Flattens one statistic into the model's z-token representation.
///
/// Histograms concatenate their per-dimension simplex vectors; state-sequence
/// tokens are materialized by the batch assembler from the trajectory itself,
/// so they have no flat form here.
pub fn flat_dim(kind: StatKind, feature_dim: usize, bins: usize) -> usize {
    match kind {
        StatKind::Return => 1,
        StatKind::Goal => feature_dim,
        StatKind::Histogram => feature_dim * bins,
        StatKind::StateSequence => 0,
    }
}

/// Writes trajectories with an extra per-timestep `stats` key for inspection.
pub fn export_with_stats(
    path: &std::path::Path,
    trajs: &[Trajectory],
    stats: &[Vec<InfoStatistic>],
) -> std::io::Result<()> {
    use std::io::Write;
    let file = std::fs::File::create(path)?;
    let mut w = std::io::BufWriter::new(file);
    for (traj, traj_stats) in trajs.iter().zip(stats) {
        let stats_json: Vec<serde_json::Value> = traj_stats
            .iter()
            .map(|s| match s {
                InfoStatistic::Return(v) => serde_json::json!([v]),
                InfoStatistic::Goal(g) => serde_json::json!(g),
                InfoStatistic::Histogram(h) => serde_json::json!(h),
                InfoStatistic::StateSequence(start) => serde_json::json!(start),
            })
            .collect();
        let mut obj = serde_json::to_value(traj).expect("trajectory serializes");
        obj.as_object_mut()
            .expect("object")
            .insert("stats".into(), serde_json::Value::Array(stats_json));
        writeln!(w, "{obj}")?;
    }
    w.flush()
}
