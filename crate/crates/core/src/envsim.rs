//! Deterministic point-velocity environments and scripted generators.
//!
//! The environment integrates a clamped velocity under bounded acceleration
//! commands; its feature of record is the velocity, which makes expert /
//! medium / target feature distributions directly controllable. Generators
//! produce quality-mixed offline datasets, spliced "patchwork" conditioning
//! targets, and synthetic Gaussian feature sketches.

use crate::dataset::{FeatureSpec, Trajectory, ACTION_HIGH, ACTION_LOW};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const VEL_LIMIT: f64 = 3.0;
pub const ACCEL_GAIN: f64 = 0.1;
pub const POS_GAIN: f64 = 0.05;
/// Proportional tracking gain used by the scripted controllers.
pub const TRACK_GAIN: f64 = 5.0;
pub const EXPERT_NOISE: f64 = 0.05;
pub const MEDIUM_NOISE: f64 = 0.4;

#[derive(Debug, Error)]
pub enum EnvError {
    #[error("episode over: horizon {0} reached")]
    EpisodeOver(usize),
    #[error("patchwork split {split} needs trajectories of length >= {split} and >= {horizon}")]
    PatchworkTooShort { split: usize, horizon: usize },
}

/// Environment construction parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvSpec {
    /// Spatial dimensionality, 1 or 2.
    pub dims: usize,
    pub horizon: usize,
    /// Velocity target used only by the reward during dataset generation.
    pub reward_target: Vec<f64>,
}

impl EnvSpec {
    pub fn point(dims: usize) -> Self {
        EnvSpec {
            dims,
            horizon: 200,
            reward_target: vec![0.0; dims],
        }
    }

    /// State is `(position, velocity)` per dimension.
    pub fn state_dim(&self) -> usize {
        2 * self.dims
    }

    pub fn action_dim(&self) -> usize {
        self.dims
    }

    /// The feature of record: the velocity components of the state.
    pub fn velocity_feature(&self) -> FeatureSpec {
        FeatureSpec::StateDims {
            dims: (self.dims..2 * self.dims).collect(),
        }
    }
}

/// A point mass with clamped velocity:
/// `v' = clamp(v + 0.1 a, [-3, 3])`, `x' = x + 0.05 v'`.
///
/// Dynamics are exactly deterministic; the only randomness is the seeded
/// initial velocity jitter, so a seed plus an action sequence reproduces the
/// state sequence bit for bit.
#[derive(Debug, Clone)]
pub struct PointVelocityEnv {
    pub spec: EnvSpec,
    position: Vec<f64>,
    velocity: Vec<f64>,
    steps: usize,
}

impl PointVelocityEnv {
    pub fn new(spec: EnvSpec) -> Self {
        let dims = spec.dims;
        PointVelocityEnv {
            spec,
            position: vec![0.0; dims],
            velocity: vec![0.0; dims],
            steps: 0,
        }
    }

    /// Resets to the origin with a small seeded velocity jitter.
    pub fn reset(&mut self, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.position = vec![0.0; self.spec.dims];
        self.velocity = (0..self.spec.dims)
            .map(|_| rng.random_range(-0.05..0.05))
            .collect();
        self.steps = 0;
        self.state()
    }

    pub fn state(&self) -> Vec<f64> {
        let mut s = self.position.clone();
        s.extend_from_slice(&self.velocity);
        s
    }

    pub fn steps_taken(&self) -> usize {
        self.steps
    }

    /// One dynamics step; the action clamps to `[-1, 1]` per component and
    /// the reward is the negative L1 tracking error against the spec target.
    pub fn step(&mut self, action: &[f64]) -> Result<(Vec<f64>, f64), EnvError> {
        if self.steps >= self.spec.horizon {
            return Err(EnvError::EpisodeOver(self.spec.horizon));
        }
        let mut reward = 0.0;
        for d in 0..self.spec.dims {
            let a = action.get(d).copied().unwrap_or(0.0).clamp(ACTION_LOW, ACTION_HIGH);
            self.velocity[d] = (self.velocity[d] + ACCEL_GAIN * a).clamp(-VEL_LIMIT, VEL_LIMIT);
            self.position[d] += POS_GAIN * self.velocity[d];
            reward -= (self.velocity[d] - self.spec.reward_target[d]).abs();
        }
        self.steps += 1;
        Ok((self.state(), reward))
    }
}

/// One scripted data-collection policy: proportional tracking of a velocity
/// target plus Gaussian action noise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControllerSpec {
    pub target_velocity: Vec<f64>,
    pub noise: f64,
    pub n_traj: usize,
    /// Free-form tag recorded in trajectory meta ("expert", "medium", ...).
    pub quality: String,
}

/// Rolls out every controller and returns the pooled trajectory list,
/// deterministic for a fixed seed.
pub fn generate_dataset(
    spec: &EnvSpec,
    controllers: &[ControllerSpec],
    seed: u64,
) -> Vec<Trajectory> {
    let mut out = Vec::new();
    let mut episode = 0u64;
    for ctrl in controllers {
        for _ in 0..ctrl.n_traj {
            let mut env = PointVelocityEnv::new(EnvSpec {
                reward_target: ctrl.target_velocity.clone(),
                ..spec.clone()
            });
            let ep_seed = seed
                .wrapping_mul(0x9E3779B97F4A7C15)
                .wrapping_add(episode);
            let mut rng = ChaCha8Rng::seed_from_u64(ep_seed);
            let noise = Normal::new(0.0, 1.0).expect("unit normal");
            let mut states = vec![env.reset(ep_seed.wrapping_add(1))];
            let mut actions = Vec::with_capacity(spec.horizon);
            let mut rewards = Vec::with_capacity(spec.horizon);
            for _ in 0..spec.horizon {
                let v = env.state()[spec.dims..].to_vec();
                let action: Vec<f64> = (0..spec.dims)
                    .map(|d| {
                        let tracked = TRACK_GAIN * (ctrl.target_velocity[d] - v[d]);
                        (tracked + ctrl.noise * noise.sample(&mut rng))
                            .clamp(ACTION_LOW, ACTION_HIGH)
                    })
                    .collect();
                let (s, r) = env.step(&action).expect("within horizon");
                states.push(s);
                actions.push(action);
                rewards.push(r);
            }
            let mut meta = std::collections::BTreeMap::new();
            meta.insert("quality".into(), ctrl.quality.clone());
            meta.insert(
                "target".into(),
                ctrl.target_velocity
                    .iter()
                    .map(|v| format!("{v}"))
                    .collect::<Vec<_>>()
                    .join(","),
            );
            meta.insert("noise".into(), format!("{}", ctrl.noise));
            out.push(Trajectory {
                states,
                actions,
                rewards,
                meta,
            });
            episode += 1;
        }
    }
    out
}

/// Velocity sweep `lo, lo + step, ..., hi` with an expert and a medium
/// controller per target, mirroring quality-mixed offline datasets.
pub fn sweep_controllers(
    lo: f64,
    hi: f64,
    step: f64,
    per_target: usize,
    dims: usize,
) -> Vec<ControllerSpec> {
    let mut out = Vec::new();
    let n = ((hi - lo) / step).round() as usize;
    for i in 0..=n {
        let v = lo + i as f64 * step;
        for (quality, noise) in [("expert", EXPERT_NOISE), ("medium", MEDIUM_NOISE)] {
            out.push(ControllerSpec {
                target_velocity: vec![v; dims],
                noise,
                n_traj: per_target,
                quality: quality.into(),
            });
        }
    }
    out
}

/// Splices `a[0..split)` with `b[split..horizon)` into one deliberately
/// dynamics-inconsistent conditioning target. Never used as training data.
pub fn patchwork_target(
    a: &Trajectory,
    b: &Trajectory,
    split: usize,
) -> Result<Trajectory, EnvError> {
    let horizon = b.len();
    if a.len() < split || horizon < split {
        return Err(EnvError::PatchworkTooShort { split, horizon });
    }
    let mut states: Vec<Vec<f64>> = a.states[..split].to_vec();
    states.extend_from_slice(&b.states[split..]);
    let mut actions: Vec<Vec<f64>> = a.actions[..split].to_vec();
    actions.extend_from_slice(&b.actions[split..]);
    let mut rewards: Vec<f64> = a.rewards[..split].to_vec();
    rewards.extend_from_slice(&b.rewards[split..]);
    let mut meta = std::collections::BTreeMap::new();
    meta.insert(
        "patchwork".into(),
        format!(
            "{}+{}@{split}",
            a.meta.get("target").cloned().unwrap_or_default(),
            b.meta.get("target").cloned().unwrap_or_default()
        ),
    );
    meta.insert("quality".into(), "patchwork".into());
    Ok(Trajectory {
        states,
        actions,
        rewards,
        meta,
    })
}

/// One Gaussian component of a synthetic target sketch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SketchComponent {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub n_samples: usize,
}

/// A scripted target distribution: Gaussian components concatenated into one
/// synthetic sequence of feature samples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetSketch {
    pub components: Vec<SketchComponent>,
}

/// Draws every component's samples in order, deterministic per seed.
pub fn synthesize_target(sketch: &TargetSketch, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for comp in &sketch.components {
        for _ in 0..comp.n_samples {
            let sample: Vec<f64> = comp
                .mean
                .iter()
                .zip(&comp.std)
                .map(|(&m, &s)| {
                    let n = Normal::new(m, s).expect("valid gaussian");
                    n.sample(&mut rng)
                })
                .collect();
            out.push(sample);
        }
    }
    out
}
