//! The optimization loop: context-window sampling over relabeled
//! trajectories, an Adam optimizer with decoupled weight decay and linear
//! warmup, global gradient clipping, per-step loss logging, and
//! checkpointing.

use crate::dataset::Trajectory;
use crate::model::{
    save_checkpoint, EncoderKind, EncoderStrategy, GdtModel, ModelConfig, ModelError, Normalizer,
    ParamSet, TokenWindow,
};
use crate::autodiff::Gradients;
use crate::stats::{compute_traj_stats, InfoStatistic, StatConfig, StatKind, StatsError};
use ndarray::Array2;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::PathBuf;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("non-finite loss at step {step} (lr {lr:.3e}, grad norm {grad_norm:.3e})")]
    NonFinite { step: usize, lr: f64, grad_norm: f64 },
    #[error("training set is empty")]
    EmptySet,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Stats(#[from] StatsError),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Checkpoint(#[from] crate::model::CheckpointError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr: f64,
    pub grad_clip: f64,
    pub weight_decay: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
    pub seed: u64,
    /// Checkpoint cadence in steps; 0 writes only the final checkpoint.
    pub checkpoint_every: usize,
    /// Unsupervised-only steps before the main loop when the encoder
    /// strategy is `frozen`.
    pub pretrain_steps: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 64,
            lr: 1e-4,
            grad_clip: 0.25,
            weight_decay: 1e-4,
            warmup_steps: 2_000,
            total_steps: 20_000,
            seed: 0,
            checkpoint_every: 0,
            pretrain_steps: 2_000,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.batch_size == 0 || self.total_steps == 0 {
            return Err(TrainError::EmptySet);
        }
        Ok(())
    }
}

/// Trajectories with their precomputed per-timestep statistics.
#[derive(Debug, Clone)]
pub struct TrainSet {
    pub trajs: Vec<Trajectory>,
    pub stats: Vec<Vec<InfoStatistic>>,
    pub kind: StatKind,
    pub stat_config: StatConfig,
}

/// Relabels every trajectory with the statistic the variant conditions on.
pub fn prepare_train_set(
    trajs: Vec<Trajectory>,
    stat_config: StatConfig,
    kind: StatKind,
) -> Result<TrainSet, TrainError> {
    if trajs.is_empty() {
        return Err(TrainError::EmptySet);
    }
    let stats = trajs
        .iter()
        .map(|t| compute_traj_stats(t, &stat_config, kind, None))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(TrainSet {
        trajs,
        stats,
        kind,
        stat_config,
    })
}

/// State whitening fitted over all states of the training trajectories.
pub fn fit_state_normalizer(trajs: &[Trajectory]) -> Normalizer {
    let dim = trajs.first().map_or(0, |t| t.state_dim());
    Normalizer::fit(
        trajs.iter().flat_map(|t| t.states.iter().map(|s| s.as_slice())),
        dim,
    )
}

/// The flat z-token row for one statistic. Return statistics are scaled to
/// keep the conditioning O(1) over long horizons.
pub fn stat_to_row(stat: &InfoStatistic, return_scale: f64) -> Vec<f64> {
    match stat {
        InfoStatistic::Return(v) => vec![v / return_scale],
        InfoStatistic::Goal(g) => g.clone(),
        InfoStatistic::Histogram(h) => h.iter().flatten().copied().collect(),
        InfoStatistic::StateSequence(_) => {
            unreachable!("state-sequence tokens are materialized from states")
        }
    }
}

/// Which trajectory and absolute start step a window was cut from.
#[derive(Debug, Clone, Copy)]
pub struct SampleInfo {
    pub traj: usize,
    pub start: usize,
}

fn window_from(
    set: &TrainSet,
    config: &ModelConfig,
    traj_idx: usize,
    start: usize,
) -> (TokenWindow, SampleInfo) {
    let traj = &set.trajs[traj_idx];
    let n = config.context_len;
    let end = (start + n).min(traj.len());
    let real = end - start;
    let pad = n - real;
    let d_s = config.state_dim;
    let d_a = config.action_dim;
    let z_dim = config.z_input_dim();

    let mut z = Array2::zeros((n, z_dim));
    let mut states = Array2::zeros((n, d_s));
    let mut actions = Array2::zeros((n, d_a));
    let mut timesteps = vec![0usize; n];
    let mut valid = vec![false; n];
    for (offset, t) in (start..end).enumerate() {
        let row = pad + offset;
        for d in 0..d_s {
            states[[row, d]] = traj.states[t][d];
        }
        for d in 0..d_a {
            actions[[row, d]] = traj.actions[t][d];
        }
        if config.z_is_states() {
            for d in 0..z_dim {
                z[[row, d]] = traj.states[t][d];
            }
        } else {
            let flat = stat_to_row(&set.stats[traj_idx][t], config.return_scale);
            for (d, &v) in flat.iter().enumerate() {
                z[[row, d]] = v;
            }
        }
        timesteps[row] = t;
        valid[row] = true;
    }
    (
        TokenWindow {
            z,
            states,
            actions,
            timesteps,
            valid,
        },
        SampleInfo {
            traj: traj_idx,
            start,
        },
    )
}

/// Uniformly samples trajectories and window starts; windows shorter than
/// the context are left-padded with a mask.
pub fn sample_batch(
    set: &TrainSet,
    config: &ModelConfig,
    batch_size: usize,
    rng: &mut ChaCha8Rng,
) -> (Vec<TokenWindow>, Vec<SampleInfo>) {
    let mut windows = Vec::with_capacity(batch_size);
    let mut infos = Vec::with_capacity(batch_size);
    for _ in 0..batch_size {
        let traj_idx = rng.random_range(0..set.trajs.len());
        let start = rng.random_range(0..set.trajs[traj_idx].len());
        let (w, info) = window_from(set, config, traj_idx, start);
        windows.push(w);
        infos.push(info);
    }
    (windows, infos)
}

/// Largest deviation between the batch's z tokens and a fresh statistics
/// recomputation on each sampled suffix. Zero for exact kinds.
pub fn hindsight_max_error(
    set: &TrainSet,
    config: &ModelConfig,
    windows: &[TokenWindow],
    infos: &[SampleInfo],
) -> Result<f64, TrainError> {
    let mut worst = 0.0f64;
    for (w, info) in windows.iter().zip(infos) {
        let traj = &set.trajs[info.traj];
        let fresh = compute_traj_stats(traj, &set.stat_config, set.kind, None)?;
        for (row, &t) in w.timesteps.iter().enumerate() {
            if !w.valid[row] {
                continue;
            }
            if config.z_is_states() {
                for d in 0..config.state_dim {
                    worst = worst.max((w.z[[row, d]] - traj.states[t][d]).abs());
                }
            } else {
                let expected = stat_to_row(&fresh[t], config.return_scale);
                for (d, &e) in expected.iter().enumerate() {
                    worst = worst.max((w.z[[row, d]] - e).abs());
                }
            }
        }
    }
    Ok(worst)
}

/// Adam with decoupled weight decay. Embeddings, biases, and normalization
/// gains never decay; frozen parameters are skipped entirely.
pub struct Adam {
    m: Vec<Array2<f64>>,
    v: Vec<Array2<f64>>,
    steps: usize,
    frozen: Vec<bool>,
    beta1: f64,
    beta2: f64,
    eps: f64,
    lr_max: f64,
    weight_decay: f64,
    warmup: usize,
}

impl Adam {
    pub fn new(params: &ParamSet, config: &TrainConfig, trainable: impl Fn(&str) -> bool) -> Self {
        Adam {
            m: params
                .entries()
                .iter()
                .map(|e| Array2::zeros(e.value.dim()))
                .collect(),
            v: params
                .entries()
                .iter()
                .map(|e| Array2::zeros(e.value.dim()))
                .collect(),
            steps: 0,
            frozen: params
                .entries()
                .iter()
                .map(|e| !trainable(&e.name))
                .collect(),
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            lr_max: config.lr,
            weight_decay: config.weight_decay,
            warmup: config.warmup_steps,
        }
    }

    /// Linear ramp from zero over the warmup, constant afterwards.
    pub fn lr_at(&self, step: usize) -> f64 {
        if self.warmup == 0 {
            self.lr_max
        } else {
            self.lr_max * (step as f64 / self.warmup as f64).min(1.0)
        }
    }

    pub fn step(&mut self, params: &mut ParamSet, grads: &Gradients, step_idx: usize) {
        let lr = self.lr_at(step_idx);
        self.steps += 1;
        let bc1 = 1.0 - self.beta1.powi(self.steps as i32);
        let bc2 = 1.0 - self.beta2.powi(self.steps as i32);
        for idx in 0..params.len() {
            if self.frozen[idx] {
                continue;
            }
            let Some(g) = &grads.params[idx] else {
                continue;
            };
            let decay = params.entry(idx).decay;
            let m = &mut self.m[idx];
            let v = &mut self.v[idx];
            m.zip_mut_with(g, |m, &g| *m = 0.9 * *m + 0.1 * g);
            v.zip_mut_with(g, |v, &g| *v = 0.999 * *v + 0.001 * g * g);
            let value = params.value_mut(idx);
            ndarray::Zip::from(&mut *value)
                .and(&*m)
                .and(&*v)
                .for_each(|p, &m, &v| {
                    let m_hat = m / bc1;
                    let v_hat = v / bc2;
                    *p -= lr * (m_hat / (v_hat.sqrt() + self.eps));
                });
            if decay && self.weight_decay > 0.0 {
                value.mapv_inplace(|p| p - lr * self.weight_decay * p);
            }
        }
    }
}

/// Scales gradients down to the clip norm; never scales up. Returns the
/// pre-clip global norm.
pub fn clip_gradients(grads: &mut Gradients, clip: f64) -> f64 {
    let norm = grads.global_norm();
    if clip > 0.0 && norm > clip {
        grads.scale(clip / norm);
    }
    norm
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct LossPoint {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
    pub grad_norm: f64,
}

#[derive(Debug)]
pub struct TrainReport {
    pub curve: Vec<LossPoint>,
}

impl TrainReport {
    /// Trailing-window mean of the recorded losses.
    pub fn smoothed_loss(&self, window: usize, at_end: bool) -> f64 {
        let n = self.curve.len().min(window).max(1);
        let slice = if at_end {
            &self.curve[self.curve.len() - n..]
        } else {
            &self.curve[..n]
        };
        slice.iter().map(|p| p.loss).sum::<f64>() / n as f64
    }
}

/// Filesystem side outputs of a training run.
#[derive(Debug, Clone, Default)]
pub struct TrainOutputs {
    pub loss_csv: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
}

fn io_err(path: &std::path::Path) -> impl Fn(std::io::Error) -> TrainError + '_ {
    move |source| TrainError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Pretrains the encoder with its unsupervised loss only, for the frozen
/// strategy. Uses the same optimizer settings restricted to encoder and
/// decoder tensors.
pub fn pretrain_encoder(
    model: &mut GdtModel,
    set: &TrainSet,
    config: &TrainConfig,
) -> Result<(), TrainError> {
    let Some(enc) = model.config.encoder.clone() else {
        return Ok(());
    };
    if enc.kind == EncoderKind::E2e || config.pretrain_steps == 0 {
        return Ok(());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(0x5E1F));
    // everything except the encoder family stays frozen during pretraining
    let mut adam = Adam::new(&model.params, config, |n| {
        n.starts_with("enc.") || n.starts_with("dec.") || n.starts_with("cpc.")
    });
    for step in 0..config.pretrain_steps {
        let (windows, _) = sample_batch(set, &model.config, config.batch_size, &mut rng);
        let (_, mut grads) = unsup_loss(model, &windows, &mut rng)?;
        clip_gradients(&mut grads, config.grad_clip);
        adam.step(&mut model.params, &grads, step.min(config.warmup_steps));
        if enc.kind == EncoderKind::Cpc {
            model.momentum_update();
        }
    }
    Ok(())
}

/// The unsupervised encoder objective on a batch: reconstruction for AE on
/// all valid window states, InfoNCE for CPC on the last valid state of each
/// window.
fn unsup_loss(
    model: &GdtModel,
    windows: &[TokenWindow],
    rng: &mut ChaCha8Rng,
) -> Result<(f64, Gradients), TrainError> {
    let kind = model
        .config
        .encoder
        .as_ref()
        .map(|e| e.kind)
        .expect("unsup loss needs an encoder");
    match kind {
        EncoderKind::Ae => {
            let rows: Vec<Vec<f64>> = windows
                .iter()
                .flat_map(|w| {
                    w.valid
                        .iter()
                        .enumerate()
                        .filter(|&(_, &v)| v)
                        .map(|(i, _)| w.states.row(i).to_vec())
                })
                .collect();
            let states = rows_to_array(&rows);
            Ok(model.ae_loss(&states)?)
        }
        EncoderKind::Cpc => {
            let rows: Vec<Vec<f64>> = windows
                .iter()
                .filter_map(|w| {
                    w.valid
                        .iter()
                        .rposition(|&v| v)
                        .map(|i| w.states.row(i).to_vec())
                })
                .collect();
            let states = rows_to_array(&rows);
            Ok(model.cpc_loss(&states, rng)?)
        }
        EncoderKind::E2e => unreachable!("e2e has no unsupervised loss"),
    }
}

fn rows_to_array(rows: &[Vec<f64>]) -> Array2<f64> {
    let cols = rows.first().map_or(0, |r| r.len());
    let mut out = Array2::zeros((rows.len(), cols));
    for (i, r) in rows.iter().enumerate() {
        for (j, &v) in r.iter().enumerate() {
            out[[i, j]] = v;
        }
    }
    out
}

/// Runs the full optimization loop: sample, differentiate, clip, step,
/// log. Aborts on a non-finite loss with diagnostics.
pub fn train(
    model: &mut GdtModel,
    set: &TrainSet,
    config: &TrainConfig,
    strategy: EncoderStrategy,
    outputs: &TrainOutputs,
) -> Result<TrainReport, TrainError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let frozen_encoder = matches!(strategy, EncoderStrategy::Frozen);
    let mut adam = Adam::new(&model.params, config, |n| {
        !(frozen_encoder
            && (n.starts_with("enc.") || n.starts_with("dec.") || n.starts_with("cpc.")))
    });
    let mut curve = Vec::with_capacity(config.total_steps);

    let mut csv = match &outputs.loss_csv {
        Some(path) => {
            let mut f = std::io::BufWriter::new(
                std::fs::File::create(path).map_err(io_err(path))?,
            );
            writeln!(f, "step,loss,lr,grad_norm").map_err(io_err(path))?;
            Some((f, path.clone()))
        }
        None => None,
    };

    let wants_unsup = model.config.encoder.as_ref().is_some_and(|e| {
        e.kind != EncoderKind::E2e && matches!(strategy, EncoderStrategy::Unsup | EncoderStrategy::Joint)
    });
    let unsup_coef = model
        .config
        .encoder
        .as_ref()
        .map(|e| e.unsup_coef)
        .unwrap_or(0.0);
    let is_cpc = model
        .config
        .encoder
        .as_ref()
        .is_some_and(|e| e.kind == EncoderKind::Cpc);

    for step in 0..config.total_steps {
        let (windows, _) = sample_batch(set, &model.config, config.batch_size, &mut rng);
        let seeds: Vec<u64> = (0..windows.len()).map(|_| rng.next_u64()).collect();
        let (bc, mut grads) = model.bc_loss(&windows, true, &seeds, strategy)?;
        let mut loss = bc;
        if wants_unsup {
            let (u, ugrads) = unsup_loss(model, &windows, &mut rng)?;
            loss += unsup_coef * u;
            grads.add_scaled(&ugrads, unsup_coef);
        }
        let lr = adam.lr_at(step);
        let grad_norm = clip_gradients(&mut grads, config.grad_clip);
        if !loss.is_finite() || !grad_norm.is_finite() {
            return Err(TrainError::NonFinite {
                step,
                lr,
                grad_norm,
            });
        }
        adam.step(&mut model.params, &grads, step);
        if is_cpc {
            model.momentum_update();
        }
        let point = LossPoint {
            step,
            loss,
            lr,
            grad_norm,
        };
        if let Some((f, path)) = &mut csv {
            writeln!(f, "{},{},{},{}", point.step, point.loss, point.lr, point.grad_norm)
                .map_err(|e| TrainError::Io {
                    path: path.display().to_string(),
                    source: e,
                })?;
        }
        curve.push(point);
        if let Some(ckpt) = &outputs.checkpoint {
            let due = config.checkpoint_every > 0 && (step + 1) % config.checkpoint_every == 0;
            if due {
                save_checkpoint(ckpt, model)?;
            }
        }
    }
    if let Some((mut f, path)) = csv {
        f.flush().map_err(|e| TrainError::Io {
            path: path.display().to_string(),
            source: e,
        })?;
    }
    if let Some(ckpt) = &outputs.checkpoint {
        save_checkpoint(ckpt, model)?;
    }
    Ok(TrainReport { curve })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envsim::{generate_dataset, ControllerSpec, EnvSpec};
    use crate::model::Aggregator;

    fn toy_set(kind: StatKind, bins: Option<usize>) -> (TrainSet, ModelConfig) {
        let mut spec = EnvSpec::point(1);
        spec.horizon = 12;
        let trajs = generate_dataset(
            &spec,
            &[
                ControllerSpec {
                    target_velocity: vec![0.5],
                    noise: 0.1,
                    n_traj: 5,
                    quality: "expert".into(),
                },
                ControllerSpec {
                    target_velocity: vec![2.0],
                    noise: 0.4,
                    n_traj: 5,
                    quality: "medium".into(),
                },
            ],
            3,
        );
        let feature = spec.velocity_feature();
        let bin_spec = bins.map(|b| {
            crate::dataset::fit_bin_spec(&trajs, &feature, b, None).unwrap()
        });
        let stat_config = StatConfig {
            gamma: 1.0,
            feature_spec: feature,
            bin_spec: bin_spec.clone(),
        };
        let set = prepare_train_set(trajs, stat_config, kind).unwrap();
        let stat_dim = match kind {
            StatKind::Return => 1,
            StatKind::Histogram => bins.unwrap(),
            _ => 1,
        };
        let config = ModelConfig {
            n_layers: 1,
            n_heads: 1,
            embed_dim: 16,
            context_len: 5,
            dropout: 0.1,
            max_horizon: 12,
            state_dim: 2,
            action_dim: 1,
            stat_dim,
            stat_kind: kind,
            aggregator: match kind {
                StatKind::Histogram => Aggregator::Binning,
                _ => Aggregator::Summation,
            },
            encoder: None,
            return_scale: 12.0,
        };
        (set, config)
    }

    #[test]
    fn windows_pad_left_and_align() {
        let (set, config) = toy_set(StatKind::Return, None);
        let (w, info) = window_from(&set, &config, 0, 10);
        // start 10 in a 12-step trajectory with context 5 -> 2 real steps
        assert_eq!(w.valid, vec![false, false, false, true, true]);
        assert_eq!(w.timesteps[3..], [10, 11]);
        assert_eq!(info.start, 10);
        let expected =
            stat_to_row(&set.stats[0][10], config.return_scale)[0];
        assert_eq!(w.z[[3, 0]], expected);
        assert_eq!(w.states[[4, 0]], set.trajs[0].states[11][0]);
        // fully covered window has no padding
        let (w2, _) = window_from(&set, &config, 0, 0);
        assert!(w2.valid.iter().all(|&v| v));
    }

    #[test]
    fn fixed_seed_reproduces_batches() {
        let (set, config) = toy_set(StatKind::Return, None);
        let mut r1 = ChaCha8Rng::seed_from_u64(5);
        let mut r2 = ChaCha8Rng::seed_from_u64(5);
        let (w1, _) = sample_batch(&set, &config, 6, &mut r1);
        let (w2, _) = sample_batch(&set, &config, 6, &mut r2);
        for (a, b) in w1.iter().zip(&w2) {
            assert_eq!(a.z, b.z);
            assert_eq!(a.states, b.states);
            assert_eq!(a.actions, b.actions);
            assert_eq!(a.timesteps, b.timesteps);
        }
    }

    #[test]
    fn sampled_windows_are_hindsight_consistent() {
        for (kind, bins) in [(StatKind::Return, None), (StatKind::Histogram, Some(6))] {
            let (set, config) = toy_set(kind, bins);
            let mut rng = ChaCha8Rng::seed_from_u64(7);
            let (windows, infos) = sample_batch(&set, &config, 64, &mut rng);
            let err = hindsight_max_error(&set, &config, &windows, &infos).unwrap();
            assert!(err < 1e-9, "kind {kind:?}: {err}");
        }
    }

    #[test]
    fn lr_schedule_endpoints() {
        let config = TrainConfig {
            lr: 1e-3,
            warmup_steps: 100,
            ..TrainConfig::default()
        };
        let ps = ParamSet::new();
        let adam = Adam::new(&ps, &config, |_| true);
        assert_eq!(adam.lr_at(0), 0.0);
        assert_eq!(adam.lr_at(50), 5e-4);
        assert_eq!(adam.lr_at(100), 1e-3);
        assert_eq!(adam.lr_at(10_000), 1e-3);
    }

    #[test]
    fn clipping_never_scales_up() {
        let mut grads = Gradients::zeros(1);
        grads.params[0] = Some(Array2::from_elem((2, 2), 1.0));
        let norm = clip_gradients(&mut grads, 0.25);
        assert_eq!(norm, 2.0);
        let clipped = grads.global_norm();
        assert!(clipped <= 0.25 + 1e-9);
        // below the clip threshold nothing changes
        let mut small = Gradients::zeros(1);
        small.params[0] = Some(Array2::from_elem((2, 2), 0.01));
        let pre = small.global_norm();
        clip_gradients(&mut small, 0.25);
        assert_eq!(small.global_norm(), pre);
    }

    #[test]
    fn training_reduces_loss_and_reproduces() {
        let (set, config) = toy_set(StatKind::Return, None);
        let train_config = TrainConfig {
            batch_size: 8,
            lr: 3e-4,
            warmup_steps: 50,
            total_steps: 500,
            seed: 9,
            ..TrainConfig::default()
        };
        let normalized_model = |seed: u64| {
            let mut m = GdtModel::new(config.clone(), seed).unwrap();
            m.set_normalizer(fit_state_normalizer(&set.trajs));
            m
        };
        let mut m1 = normalized_model(1);
        let report = train(&mut m1, &set, &train_config, EncoderStrategy::Frozen, &TrainOutputs::default()).unwrap();
        let initial = report.smoothed_loss(50, false);
        let fin = report.smoothed_loss(50, true);
        assert!(
            fin < 0.5 * initial,
            "smoothed loss {initial} -> {fin}"
        );
        // same seed, same everything
        let mut m2 = normalized_model(1);
        let report2 = train(&mut m2, &set, &train_config, EncoderStrategy::Frozen, &TrainOutputs::default()).unwrap();
        for (a, b) in report.curve.iter().zip(&report2.curve) {
            assert_eq!(a.loss, b.loss);
            assert_eq!(a.grad_norm, b.grad_norm);
        }
        for (ea, eb) in m1.params.entries().iter().zip(m2.params.entries()) {
            assert_eq!(ea.value, eb.value, "{}", ea.name);
        }
    }

    #[test]
    fn loss_csv_written() {
        let (set, config) = toy_set(StatKind::Return, None);
        let dir = tempfile::tempdir().unwrap();
        let csv = dir.path().join("loss.csv");
        let ckpt = dir.path().join("checkpoint.gdt");
        let mut model = GdtModel::new(config, 1).unwrap();
        model.set_normalizer(fit_state_normalizer(&set.trajs));
        let train_config = TrainConfig {
            batch_size: 4,
            total_steps: 10,
            warmup_steps: 5,
            checkpoint_every: 4,
            seed: 2,
            ..TrainConfig::default()
        };
        train(
            &mut model,
            &set,
            &train_config,
            EncoderStrategy::Frozen,
            &TrainOutputs {
                loss_csv: Some(csv.clone()),
                checkpoint: Some(ckpt.clone()),
            },
        )
        .unwrap();
        let text = std::fs::read_to_string(&csv).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "step,loss,lr,grad_norm");
        assert_eq!(lines.len(), 11);
        let loaded = crate::model::load_checkpoint(&ckpt).unwrap();
        assert_eq!(loaded.config, model.config);
    }
}
