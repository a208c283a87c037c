//! Rollout harness and distribution-matching evaluation: condition the
//! policy on a target, roll it out in the environment, pool realized
//! features into an empirical distribution, and score it against the
//! target's distribution with Wasserstein-1.

mod dist;
mod plots;
mod w1;

pub use dist::{empirical_distribution, wasserstein1, wasserstein1_per_dim, CategoricalDistribution, DistError, DistMode};
pub use plots::histogram_svg;
pub use w1::{solve_transport, wasserstein1_1d, TransportError, TransportPlan};

use crate::dataset::{apply_feature, BinSpec, DatasetError, FeatureSpec, Trajectory};
use crate::envsim::{EnvError, EnvSpec, PointVelocityEnv};
use crate::model::{GdtModel, ModelError, TokenWindow};
use crate::stats::{stats_of_features, StatConfig, StatsError};
use crate::trainer::stat_to_row;
use ndarray::Array2;
use rayon::prelude::*;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("target {0} is empty")]
    EmptyTarget(String),
    #[error("synthetic feature targets cannot condition a state-sequence variant")]
    NeedsStates,
    #[error("shift transform is not defined for learned features")]
    ShiftUnsupported,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Stats(#[from] StatsError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Dist(#[from] DistError),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// What the policy is asked to match.
#[derive(Debug, Clone)]
pub enum TargetKind {
    /// A real (or patchworked) trajectory: states drive state-sequence
    /// variants, features drive statistic variants and the reference
    /// distribution.
    Trajectory(Trajectory),
    /// Bare feature samples from a scripted sketch.
    FeatureSamples(Vec<Vec<f64>>),
}

#[derive(Debug, Clone)]
pub struct EvalTarget {
    pub id: String,
    pub quality: String,
    pub kind: TargetKind,
}

impl EvalTarget {
    pub fn from_trajectory(id: impl Into<String>, traj: Trajectory) -> Self {
        let quality = traj
            .meta
            .get("quality")
            .cloned()
            .unwrap_or_else(|| "unknown".into());
        EvalTarget {
            id: id.into(),
            quality,
            kind: TargetKind::Trajectory(traj),
        }
    }

    pub fn len(&self) -> usize {
        match &self.kind {
            TargetKind::Trajectory(t) => t.len(),
            TargetKind::FeatureSamples(s) => s.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// The feature samples the target distribution is built from.
    pub fn features(&self, spec: &FeatureSpec) -> Result<Vec<Vec<f64>>, EvalError> {
        match &self.kind {
            TargetKind::Trajectory(t) => Ok(apply_feature(t, spec, None)?),
            TargetKind::FeatureSamples(s) => Ok(s.clone()),
        }
    }
}

/// Shifts a target's feature values by `shift_bins` bin widths, the
/// constant-offset generalization probe. State-dim features shift the
/// underlying state dimensions so state-sequence conditioning stays
/// coherent.
pub fn shift_target(
    target: &EvalTarget,
    shift_bins: i32,
    bin_spec: &BinSpec,
    feature_spec: &FeatureSpec,
) -> Result<EvalTarget, EvalError> {
    let offsets: Vec<f64> = bin_spec
        .dims
        .iter()
        .map(|d| shift_bins as f64 * d.width())
        .collect();
    let kind = match &target.kind {
        TargetKind::FeatureSamples(samples) => TargetKind::FeatureSamples(
            samples
                .iter()
                .map(|s| s.iter().zip(&offsets).map(|(v, o)| v + o).collect())
                .collect(),
        ),
        TargetKind::Trajectory(traj) => {
            let mut t = traj.clone();
            match feature_spec {
                FeatureSpec::Reward => {
                    for r in &mut t.rewards {
                        *r += offsets[0];
                    }
                }
                FeatureSpec::StateDims { dims } => {
                    for s in &mut t.states {
                        for (k, &d) in dims.iter().enumerate() {
                            s[d] += offsets[k];
                        }
                    }
                }
                FeatureSpec::Identity => {
                    for s in &mut t.states {
                        for (d, o) in s.iter_mut().zip(&offsets) {
                            *d += o;
                        }
                    }
                }
                FeatureSpec::Learned { .. } => return Err(EvalError::ShiftUnsupported),
            }
            TargetKind::Trajectory(t)
        }
    };
    Ok(EvalTarget {
        id: if shift_bins == 0 {
            target.id.clone()
        } else {
            format!("{}_shift{:+}", target.id, shift_bins)
        },
        quality: target.quality.clone(),
        kind,
    })
}

/// Per-timestep conditioning stream for a rollout.
enum Conditioning {
    /// Flattened statistic rows, already return-scaled.
    Stats(Vec<Vec<f64>>),
    /// Target observations for state-sequence variants.
    States(Vec<Vec<f64>>),
}

impl Conditioning {
    fn row(&self, t: usize) -> &[f64] {
        match self {
            Conditioning::Stats(v) => &v[t],
            Conditioning::States(v) => &v[t],
        }
    }
}

fn conditioning_for(
    model: &GdtModel,
    target: &EvalTarget,
    stat_config: &StatConfig,
) -> Result<Conditioning, EvalError> {
    if target.is_empty() {
        return Err(EvalError::EmptyTarget(target.id.clone()));
    }
    if model.config.z_is_states() {
        match &target.kind {
            TargetKind::Trajectory(t) => Ok(Conditioning::States(t.states.clone())),
            TargetKind::FeatureSamples(_) => Err(EvalError::NeedsStates),
        }
    } else {
        let features = target.features(&stat_config.feature_spec)?;
        let stats = stats_of_features(&features, stat_config, model.config.stat_kind)?;
        Ok(Conditioning::Stats(
            stats
                .iter()
                .map(|s| stat_to_row(s, model.config.return_scale))
                .collect(),
        ))
    }
}

/// Algorithm-style evaluation loop: predict the newest action from the last
/// `N` (z, s, a) entries, step the environment, append the next conditioning
/// token, truncate to the context.
pub fn rollout(
    model: &GdtModel,
    env_spec: &EnvSpec,
    target: &EvalTarget,
    stat_config: &StatConfig,
    seed: u64,
) -> Result<Trajectory, EvalError> {
    let cond = conditioning_for(model, target, stat_config)?;
    let n = model.config.context_len;
    let steps = env_spec.horizon.min(target.len());
    let mut env = PointVelocityEnv::new(env_spec.clone());

    let mut z_rows: Vec<Vec<f64>> = vec![cond.row(0).to_vec()];
    let mut s_rows: Vec<Vec<f64>> = vec![env.reset(seed)];
    let mut a_rows: Vec<Vec<f64>> = Vec::new();
    let mut t_idx: Vec<usize> = vec![0];

    let mut out = Trajectory {
        states: vec![s_rows[0].clone()],
        actions: Vec::new(),
        rewards: Vec::new(),
        meta: std::collections::BTreeMap::new(),
    };

    for step in 0..steps {
        let l = z_rows.len();
        debug_assert!(l <= n, "context streams stay within the window");
        let mut actions = a_rows.clone();
        actions.push(vec![0.0; model.config.action_dim]);
        let window = TokenWindow {
            z: rows_to_array(&z_rows, model.config.z_input_dim()),
            states: rows_to_array(&s_rows, model.config.state_dim),
            actions: rows_to_array(&actions, model.config.action_dim),
            timesteps: t_idx.clone(),
            valid: vec![true; l],
        };
        let pred = model.predict_actions(&window)?;
        let action: Vec<f64> = pred.row(l - 1).iter().map(|&a| a.clamp(-1.0, 1.0)).collect();
        let (new_state, reward) = env.step(&action)?;

        out.states.push(new_state.clone());
        out.actions.push(action.clone());
        out.rewards.push(reward);

        if step + 1 < steps {
            z_rows.push(cond.row(step + 1).to_vec());
            s_rows.push(new_state);
            a_rows.push(action);
            t_idx.push(step + 1);
            if z_rows.len() > n {
                z_rows.remove(0);
                s_rows.remove(0);
                a_rows.remove(0);
                t_idx.remove(0);
            }
        }
    }
    Ok(out)
}

fn rows_to_array(rows: &[Vec<f64>], cols: usize) -> Array2<f64> {
    let mut out = Array2::zeros((rows.len(), cols));
    for (i, r) in rows.iter().enumerate() {
        for (j, &v) in r.iter().take(cols).enumerate() {
            out[[i, j]] = v;
        }
    }
    out
}

#[derive(Debug, Clone)]
pub struct EvalConfig {
    pub rollouts_per_seed: usize,
    pub n_seeds: usize,
    pub base_seed: u64,
    pub mode: DistMode,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            rollouts_per_seed: 20,
            n_seeds: 4,
            base_seed: 0,
            mode: DistMode::PerDim,
        }
    }
}

/// One seed group's Wasserstein-1 numbers for a target.
#[derive(Debug, Clone)]
pub struct SeedReport {
    pub seed_index: usize,
    /// W1 between the target and the distribution pooled over this seed's
    /// rollouts.
    pub w1_pooled: f64,
    /// Mean and spread of per-rollout W1 values inside the seed group.
    pub w1_rollout_mean: f64,
    pub w1_rollout_std: f64,
}

#[derive(Debug, Clone)]
pub struct TargetReport {
    pub id: String,
    pub quality: String,
    pub seeds: Vec<SeedReport>,
    /// W1 of the distribution pooled over every rollout of every seed.
    pub w1_pooled_all: f64,
    /// Pooled rollout weights, kept for plotting.
    pub rollout_dist: CategoricalDistribution,
    pub target_dist: CategoricalDistribution,
}

#[derive(Debug, Clone)]
pub struct EvalReport {
    pub targets: Vec<TargetReport>,
}

impl EvalReport {
    /// Mean of per-seed pooled W1 over every (target, seed) pair — the
    /// headline number.
    pub fn mean_w1(&self) -> f64 {
        let values: Vec<f64> = self
            .targets
            .iter()
            .flat_map(|t| t.seeds.iter().map(|s| s.w1_pooled))
            .collect();
        values.iter().sum::<f64>() / values.len().max(1) as f64
    }

    pub fn std_w1(&self) -> f64 {
        let values: Vec<f64> = self
            .targets
            .iter()
            .flat_map(|t| t.seeds.iter().map(|s| s.w1_pooled))
            .collect();
        let mean = self.mean_w1();
        (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>()
            / values.len().max(1) as f64)
            .sqrt()
    }

    /// CSV rows `(target_id, quality_tag, seed, w1_mean, w1_std)`: per-seed
    /// pooled W1 plus the per-rollout spread within the seed.
    pub fn write_csv(&self, path: &std::path::Path) -> Result<(), EvalError> {
        use std::io::Write;
        let file = std::fs::File::create(path).map_err(|source| EvalError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let mut w = std::io::BufWriter::new(file);
        let mut emit = |line: String| -> Result<(), EvalError> {
            writeln!(w, "{line}").map_err(|source| EvalError::Io {
                path: path.display().to_string(),
                source,
            })
        };
        emit("target_id,quality_tag,seed,w1_mean,w1_std".into())?;
        for t in &self.targets {
            for s in &t.seeds {
                emit(format!(
                    "{},{},{},{},{}",
                    t.id, t.quality, s.seed_index, s.w1_pooled, s.w1_rollout_std
                ))?;
            }
        }
        Ok(())
    }
}

fn mix_seed(base: u64, target: usize, seed_group: usize, rollout: usize) -> u64 {
    let mut x = base
        .wrapping_mul(0x9E3779B97F4A7C15)
        .wrapping_add(target as u64)
        .wrapping_mul(0xBF58476D1CE4E5B9)
        .wrapping_add(seed_group as u64)
        .wrapping_mul(0x94D049BB133111EB)
        .wrapping_add(rollout as u64);
    x ^= x >> 31;
    x
}

/// Runs the configured rollouts for every target, pools realized features,
/// and reports Wasserstein-1 against each target distribution.
pub fn evaluate(
    model: &GdtModel,
    env_spec: &EnvSpec,
    targets: &[EvalTarget],
    stat_config: &StatConfig,
    bin_spec: &BinSpec,
    config: &EvalConfig,
) -> Result<EvalReport, EvalError> {
    let jobs: Vec<(usize, usize, usize)> = (0..targets.len())
        .flat_map(|t| {
            (0..config.n_seeds)
                .flat_map(move |s| (0..config.rollouts_per_seed).map(move |r| (t, s, r)))
        })
        .collect();
    let rolled: Result<Vec<Vec<Vec<f64>>>, EvalError> = jobs
        .par_iter()
        .map(|&(t, s, r)| {
            let traj = rollout(
                model,
                env_spec,
                &targets[t],
                stat_config,
                mix_seed(config.base_seed, t, s, r),
            )?;
            Ok(apply_feature(&traj, &stat_config.feature_spec, None)?)
        })
        .collect();
    let rolled = rolled?;

    let per_seed = config.rollouts_per_seed;
    let mut reports = Vec::with_capacity(targets.len());
    for (t_idx, target) in targets.iter().enumerate() {
        let target_dist =
            empirical_distribution(&target.features(&stat_config.feature_spec)?, bin_spec, config.mode)?;
        let mut seeds = Vec::with_capacity(config.n_seeds);
        let mut all_feats: Vec<Vec<f64>> = Vec::new();
        for s in 0..config.n_seeds {
            let base = t_idx * config.n_seeds * per_seed + s * per_seed;
            let group: &[Vec<Vec<f64>>] = &rolled[base..base + per_seed];
            let pooled: Vec<Vec<f64>> = group.iter().flatten().cloned().collect();
            all_feats.extend(pooled.iter().cloned());
            let pooled_dist = empirical_distribution(&pooled, bin_spec, config.mode)?;
            let w1_pooled = wasserstein1(&pooled_dist, &target_dist)?;
            let per_rollout: Vec<f64> = group
                .iter()
                .map(|feats| {
                    let d = empirical_distribution(feats, bin_spec, config.mode)?;
                    wasserstein1(&d, &target_dist)
                })
                .collect::<Result<_, _>>()?;
            let mean = per_rollout.iter().sum::<f64>() / per_rollout.len().max(1) as f64;
            let std = (per_rollout.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>()
                / per_rollout.len().max(1) as f64)
                .sqrt();
            seeds.push(SeedReport {
                seed_index: s,
                w1_pooled,
                w1_rollout_mean: mean,
                w1_rollout_std: std,
            });
        }
        let rollout_dist = empirical_distribution(&all_feats, bin_spec, config.mode)?;
        let w1_pooled_all = wasserstein1(&rollout_dist, &target_dist)?;
        reports.push(TargetReport {
            id: target.id.clone(),
            quality: target.quality.clone(),
            seeds,
            w1_pooled_all,
            rollout_dist,
            target_dist,
        });
    }
    Ok(EvalReport { targets: reports })
}
