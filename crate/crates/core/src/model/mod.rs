//! The conditioned decision transformer: token embeddings, a causally-masked
//! decoder over interleaved `(z, s, a)` token triples, pluggable anti-causal
//! aggregators, learned-feature encoders, and the behavioral-cloning loss
//! with reverse-mode gradients for every parameter.

mod checkpoint;
mod encoder;
pub mod gradcheck;
mod params;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointError};
pub use params::{ParamEntry, ParamSet, INIT_STD};

use crate::autodiff::{Gradients, Graph, NodeId};
use crate::dataset::FeatureEncoder;
use crate::stats::StatKind;
use ndarray::{Array2, ArrayView2};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::sync::Arc;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("timestep {t} out of range (max_horizon {max})")]
    TimestepOutOfRange { t: usize, max: usize },
    #[error("operation requires the {expected} aggregator")]
    WrongAggregator { expected: &'static str },
    #[error("batch contains no unpadded positions")]
    EmptyBatch,
    #[error("contrastive loss needs a batch of at least 2 states")]
    NeedsNegatives,
    #[error("invalid model config: {0}")]
    Config(String),
}

/// How the future is compressed into the per-timestep conditioning token.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum Aggregator {
    /// Precomputed scalar/vector statistics (returns-to-go, goals, summed
    /// learned features) fed straight to the z embedding.
    Summation,
    /// Precomputed categorical histograms, flattened per dimension.
    Binning,
    /// A second causally-masked transformer over the reversed target state
    /// sequence.
    AntiCausalTransformer { latent_dim: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EncoderKind {
    Ae,
    Cpc,
    E2e,
}

/// How encoder parameters are trained alongside the policy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EncoderStrategy {
    /// Unsupervised loss only; the policy loss stops at the latents.
    Unsup,
    /// One optimizer over everything, unsupervised term weighted in.
    Joint,
    /// Pretrained then excluded from the optimizer.
    Frozen,
}

/// Learned feature function settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub kind: EncoderKind,
    pub latent_dim: usize,
    pub hidden: (usize, usize),
    /// CPC momentum-encoder coefficient.
    pub momentum: f64,
    /// CPC augmentation noise, applied to normalized states.
    pub noise_std: f64,
    /// Weight of the unsupervised loss when trained jointly.
    pub unsup_coef: f64,
}

impl EncoderConfig {
    pub fn new(kind: EncoderKind, latent_dim: usize) -> Self {
        EncoderConfig {
            kind,
            latent_dim,
            hidden: (128, 128),
            momentum: 0.95,
            noise_std: 0.1,
            unsup_coef: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub embed_dim: usize,
    /// Context length N in timesteps; the token stream holds 3N tokens.
    pub context_len: usize,
    pub dropout: f64,
    pub max_horizon: usize,
    pub state_dim: usize,
    pub action_dim: usize,
    /// Width of precomputed statistic tokens (1 for returns, n*B for
    /// histograms); ignored by the anti-causal aggregator and learned
    /// encoders, which consume raw states.
    pub stat_dim: usize,
    /// Which hindsight statistic the z tokens carry.
    pub stat_kind: StatKind,
    pub aggregator: Aggregator,
    pub encoder: Option<EncoderConfig>,
    /// Return statistics are divided by this before embedding so the
    /// conditioning scale stays O(1) over long horizons.
    pub return_scale: f64,
}

impl ModelConfig {
    /// Paper-default architecture around a given environment shape.
    pub fn default_for(state_dim: usize, action_dim: usize, max_horizon: usize) -> Self {
        ModelConfig {
            n_layers: 3,
            n_heads: 1,
            embed_dim: 128,
            context_len: 20,
            dropout: 0.1,
            max_horizon,
            state_dim,
            action_dim,
            stat_dim: 1,
            stat_kind: StatKind::Return,
            aggregator: Aggregator::Summation,
            encoder: None,
            return_scale: max_horizon as f64,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.embed_dim == 0 || self.embed_dim % self.n_heads != 0 {
            return Err(ModelError::Config(format!(
                "embed_dim {} must be a positive multiple of n_heads {}",
                self.embed_dim, self.n_heads
            )));
        }
        if self.context_len == 0 {
            return Err(ModelError::Config("context_len must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(ModelError::Config(format!("dropout {} not in [0, 1)", self.dropout)));
        }
        if self.return_scale <= 0.0 {
            return Err(ModelError::Config("return_scale must be positive".into()));
        }
        if let (Aggregator::AntiCausalTransformer { .. }, Some(_)) = (&self.aggregator, &self.encoder) {
            return Err(ModelError::Config(
                "anti-causal aggregator has its own representation; encoder not supported".into(),
            ));
        }
        let histogram = self.stat_kind == StatKind::Histogram;
        if histogram != matches!(self.aggregator, Aggregator::Binning) {
            return Err(ModelError::Config(
                "histogram statistics pair with the binning aggregator".into(),
            ));
        }
        if matches!(self.aggregator, Aggregator::AntiCausalTransformer { .. })
            && self.stat_kind != StatKind::StateSequence
        {
            return Err(ModelError::Config(
                "the anti-causal aggregator consumes state sequences".into(),
            ));
        }
        if self.encoder.is_some() && self.stat_kind != StatKind::StateSequence {
            return Err(ModelError::Config(
                "learned encoders consume state sequences".into(),
            ));
        }
        Ok(())
    }

    /// Column count expected of [`TokenWindow::z`].
    pub fn z_input_dim(&self) -> usize {
        if self.z_is_states() {
            self.state_dim
        } else {
            self.stat_dim
        }
    }

    /// Input width of the z embedding layer.
    fn z_embed_in(&self) -> usize {
        match (&self.aggregator, &self.encoder) {
            (Aggregator::AntiCausalTransformer { latent_dim }, _) => *latent_dim,
            (_, Some(enc)) => enc.latent_dim,
            _ => self.stat_dim,
        }
    }

    /// True when z tokens are raw states (anti-causal or learned features).
    pub fn z_is_states(&self) -> bool {
        self.stat_kind == StatKind::StateSequence
    }
}

/// Per-dimension state whitening fitted on the training set and stored with
/// the checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalizer {
    pub fn identity(dim: usize) -> Self {
        Normalizer {
            mean: vec![0.0; dim],
            std: vec![1.0; dim],
        }
    }

    pub fn fit<'a>(states: impl Iterator<Item = &'a [f64]>, dim: usize) -> Self {
        let mut n = 0.0;
        let mut mean = vec![0.0; dim];
        let mut m2 = vec![0.0; dim];
        for s in states {
            n += 1.0;
            for d in 0..dim {
                let delta = s[d] - mean[d];
                mean[d] += delta / n;
                m2[d] += delta * (s[d] - mean[d]);
            }
        }
        let std = m2
            .iter()
            .map(|&v| (v / n.max(1.0)).sqrt().max(1e-6))
            .collect();
        Normalizer { mean, std }
    }

    pub fn apply(&self, states: &Array2<f64>) -> Array2<f64> {
        let mut out = states.clone();
        for mut row in out.rows_mut() {
            for d in 0..self.mean.len() {
                row[d] = (row[d] - self.mean[d]) / self.std[d];
            }
        }
        out
    }
}

/// One aligned context window of conditioning tokens, states, and actions.
///
/// All sequences share length `L <= context_len`; `valid[t] == false` marks
/// left padding, which is excluded from attention and from the loss.
#[derive(Debug, Clone)]
pub struct TokenWindow {
    /// Raw statistic rows, or raw target/window states for the anti-causal
    /// aggregator and learned encoders.
    pub z: Array2<f64>,
    pub states: Array2<f64>,
    pub actions: Array2<f64>,
    pub timesteps: Vec<usize>,
    pub valid: Vec<bool>,
}

impl TokenWindow {
    pub fn len(&self) -> usize {
        self.timesteps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.timesteps.is_empty()
    }

    pub fn n_valid(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }
}

/// The trainable artifact: config, parameters, state whitening, and (for
/// CPC) the momentum copy of the encoder weights.
#[derive(Debug, Clone)]
pub struct GdtModel {
    pub config: ModelConfig,
    pub params: ParamSet,
    pub normalizer: Normalizer,
    /// Momentum encoder weights, parallel to the `enc.*` registry entries.
    pub momentum_encoder: Option<Vec<Arc<Array2<f64>>>>,
}

const MLP_RATIO: usize = 4;

fn stack_params(ps: &mut ParamSet, rng: &mut ChaCha8Rng, prefix: &str, n_layers: usize, dim: usize) {
    for i in 0..n_layers {
        ps.gain(&format!("{prefix}block{i}.ln1.g"), dim);
        ps.bias(&format!("{prefix}block{i}.ln1.b"), dim);
        ps.weight(rng, &format!("{prefix}block{i}.attn.qkv.w"), dim, 3 * dim);
        ps.bias(&format!("{prefix}block{i}.attn.qkv.b"), 3 * dim);
        ps.weight(rng, &format!("{prefix}block{i}.attn.proj.w"), dim, dim);
        ps.bias(&format!("{prefix}block{i}.attn.proj.b"), dim);
        ps.gain(&format!("{prefix}block{i}.ln2.g"), dim);
        ps.bias(&format!("{prefix}block{i}.ln2.b"), dim);
        ps.weight(rng, &format!("{prefix}block{i}.mlp.fc.w"), dim, MLP_RATIO * dim);
        ps.bias(&format!("{prefix}block{i}.mlp.fc.b"), MLP_RATIO * dim);
        ps.weight(rng, &format!("{prefix}block{i}.mlp.proj.w"), MLP_RATIO * dim, dim);
        ps.bias(&format!("{prefix}block{i}.mlp.proj.b"), dim);
    }
    ps.gain(&format!("{prefix}ln_f.g"), dim);
    ps.bias(&format!("{prefix}ln_f.b"), dim);
}

impl GdtModel {
    /// Builds a freshly initialized model; the parameter set is a
    /// deterministic function of the config and seed.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.embed_dim;
        let mut ps = ParamSet::new();

        ps.weight(&mut rng, "embed_s.w", config.state_dim, d);
        ps.bias("embed_s.b", d);
        ps.weight(&mut rng, "embed_a.w", config.action_dim, d);
        ps.bias("embed_a.b", d);
        ps.weight(&mut rng, "embed_z.w", config.z_embed_in(), d);
        ps.bias("embed_z.b", d);
        ps.table(&mut rng, "embed_t.table", config.max_horizon, d);
        ps.gain("embed_ln.g", d);
        ps.bias("embed_ln.b", d);
        stack_params(&mut ps, &mut rng, "", config.n_layers, d);
        ps.weight(&mut rng, "pred_a.w", d, config.action_dim);
        ps.bias("pred_a.b", config.action_dim);

        if let Aggregator::AntiCausalTransformer { latent_dim } = config.aggregator {
            ps.weight(&mut rng, "anti.embed.w", config.state_dim, d);
            ps.bias("anti.embed.b", d);
            ps.table(&mut rng, "anti.pos.table", config.max_horizon, d);
            stack_params(&mut ps, &mut rng, "anti.", config.n_layers, d);
            ps.weight(&mut rng, "anti.head.w", d, latent_dim);
            ps.bias("anti.head.b", latent_dim);
        }

        let mut momentum_encoder = None;
        if let Some(enc) = &config.encoder {
            let (h1, h2) = enc.hidden;
            ps.weight(&mut rng, "enc.l1.w", config.state_dim, h1);
            ps.bias("enc.l1.b", h1);
            ps.weight(&mut rng, "enc.l2.w", h1, h2);
            ps.bias("enc.l2.b", h2);
            ps.weight(&mut rng, "enc.l3.w", h2, enc.latent_dim);
            ps.bias("enc.l3.b", enc.latent_dim);
            match enc.kind {
                EncoderKind::Ae => {
                    ps.weight(&mut rng, "dec.l1.w", enc.latent_dim, h2);
                    ps.bias("dec.l1.b", h2);
                    ps.weight(&mut rng, "dec.l2.w", h2, h1);
                    ps.bias("dec.l2.b", h1);
                    ps.weight(&mut rng, "dec.l3.w", h1, config.state_dim);
                    ps.bias("dec.l3.b", config.state_dim);
                }
                EncoderKind::Cpc => {
                    ps.weight(&mut rng, "cpc.w", enc.latent_dim, enc.latent_dim);
                    momentum_encoder = Some(
                        encoder::ENCODER_PARAMS
                            .iter()
                            .map(|name| ps.value(name).clone())
                            .collect(),
                    );
                }
                EncoderKind::E2e => {}
            }
        }

        Ok(GdtModel {
            config,
            params: ps,
            normalizer: Normalizer::identity(0),
            momentum_encoder,
        })
    }

    /// Installs state whitening; dimension must match the config.
    pub fn set_normalizer(&mut self, normalizer: Normalizer) {
        assert!(
            normalizer.mean.is_empty() || normalizer.mean.len() == self.config.state_dim,
            "normalizer dimension"
        );
        self.normalizer = normalizer;
    }

    fn normalize(&self, states: &Array2<f64>) -> Array2<f64> {
        if self.normalizer.mean.is_empty() {
            states.clone()
        } else {
            self.normalizer.apply(states)
        }
    }

    pub fn n_scalar_params(&self) -> usize {
        self.params.n_scalars()
    }

    fn check_window(&self, w: &TokenWindow) -> Result<(), ModelError> {
        let l = w.len();
        if l == 0 || l > self.config.context_len {
            return Err(ModelError::Shape(format!(
                "window length {l} outside 1..={}",
                self.config.context_len
            )));
        }
        if w.states.dim() != (l, self.config.state_dim)
            || w.actions.dim() != (l, self.config.action_dim)
            || w.z.dim() != (l, self.config.z_input_dim())
            || w.valid.len() != l
        {
            return Err(ModelError::Shape(format!(
                "window arrays disagree: z {:?} states {:?} actions {:?} len {l}",
                w.z.dim(),
                w.states.dim(),
                w.actions.dim()
            )));
        }
        for &t in &w.timesteps {
            if t >= self.config.max_horizon {
                return Err(ModelError::TimestepOutOfRange {
                    t,
                    max: self.config.max_horizon,
                });
            }
        }
        Ok(())
    }

    /// Eval-mode action predictions, one row per window position.
    pub fn predict_actions(&self, window: &TokenWindow) -> Result<Array2<f64>, ModelError> {
        let mut g = Graph::new();
        let pred = self.build_forward(&mut g, window, None, EncoderStrategy::Frozen)?;
        Ok(g.value(pred).to_owned())
    }

    /// Runs the anti-causal transformer over a target state sequence and
    /// returns the z-token embeddings, one row per timestep. The embedding
    /// at position `t` depends only on states `t..`.
    pub fn aggregate_anticausal(&self, target_states: &Array2<f64>) -> Result<Array2<f64>, ModelError> {
        if !matches!(self.config.aggregator, Aggregator::AntiCausalTransformer { .. }) {
            return Err(ModelError::WrongAggregator {
                expected: "anti-causal-transformer",
            });
        }
        let l = target_states.nrows();
        if l == 0 || l > self.config.context_len {
            return Err(ModelError::Shape(format!(
                "target length {l} outside 1..={}",
                self.config.context_len
            )));
        }
        let mut g = Graph::new();
        let mut cache = ParamCache::new(self.params.len());
        let z_in = g.input(self.normalize(target_states));
        let valid = vec![true; l];
        let emb = self.anti_causal_embed(&mut g, &mut cache, z_in, &valid, &mut None)?;
        Ok(g.value(emb).to_owned())
    }

    /// Mean-squared behavioral-cloning loss over every unpadded position of
    /// the batch, with gradients for all trainable parameters.
    ///
    /// `seeds` provides one dropout stream per window when training.
    /// Gradient accumulation is chunked deterministically, so results do not
    /// depend on scheduling.
    pub fn bc_loss(
        &self,
        windows: &[TokenWindow],
        train: bool,
        seeds: &[u64],
        strategy: EncoderStrategy,
    ) -> Result<(f64, Gradients), ModelError> {
        if train {
            assert_eq!(seeds.len(), windows.len(), "one dropout seed per window");
        }
        for w in windows {
            self.check_window(w)?;
        }
        let total_valid: usize = windows.iter().map(|w| w.n_valid()).sum();
        if total_valid == 0 {
            return Err(ModelError::EmptyBatch);
        }
        let denom = (total_valid * self.config.action_dim) as f64;

        let chunk_size = windows.len().div_ceil(8).max(1);
        let jobs: Vec<(usize, &[TokenWindow])> = windows.chunks(chunk_size).enumerate().collect();
        let results: Result<Vec<(f64, Gradients)>, ModelError> = jobs
            .into_par_iter()
            .map(|(chunk_idx, chunk)| {
                let mut loss_sum = 0.0;
                let mut grads = Gradients::zeros(self.params.len());
                for (k, w) in chunk.iter().enumerate() {
                    let sample_idx = chunk_idx * chunk_size + k;
                    let mut rng = if train {
                        Some(ChaCha8Rng::seed_from_u64(seeds[sample_idx]))
                    } else {
                        None
                    };
                    let mut g = Graph::new();
                    let pred = self.build_forward(&mut g, w, rng.as_mut(), strategy)?;
                    let target = g.input(w.actions.clone());
                    let diff = g.sub(pred, target);
                    let sq = g.mul(diff, diff);
                    let valid_col = Array2::from_shape_fn((w.len(), 1), |(i, _)| {
                        if w.valid[i] {
                            1.0
                        } else {
                            0.0
                        }
                    });
                    let vmask = g.input(valid_col);
                    let masked = g.mul_col(sq, vmask);
                    let total = g.sum_all(masked);
                    loss_sum += g.scalar(total);
                    grads.add_scaled(&g.backward(total, self.params.len()), 1.0);
                }
                Ok((loss_sum, grads))
            })
            .collect();

        let mut loss = 0.0;
        let mut grads = Gradients::zeros(self.params.len());
        for (chunk_loss, chunk_grads) in results? {
            loss += chunk_loss;
            grads.add_scaled(&chunk_grads, 1.0 / denom);
        }
        Ok((loss / denom, grads))
    }

    fn build_forward(
        &self,
        g: &mut Graph,
        w: &TokenWindow,
        mut rng: Option<&mut ChaCha8Rng>,
        strategy: EncoderStrategy,
    ) -> Result<NodeId, ModelError> {
        self.check_window(w)?;
        let mut cache = ParamCache::new(self.params.len());
        let l = w.len();
        let d = self.config.embed_dim;

        let z_emb = self.z_embedding(g, &mut cache, w, &mut rng, strategy)?;
        let s_in = g.input(self.normalize(&w.states));
        let s_emb = self.linear(g, &mut cache, s_in, "embed_s");
        let a_in = g.input(w.actions.clone());
        let a_emb = self.linear(g, &mut cache, a_in, "embed_a");

        let table = cache.node(g, &self.params, "embed_t.table");
        let pos = g.gather_rows(table, Arc::new(w.timesteps.clone()));

        let z_tok = g.add(z_emb, pos);
        let s_tok = g.add(s_emb, pos);
        let a_tok = g.add(a_emb, pos);
        let mut tok = g.interleave3(z_tok, s_tok, a_tok);
        tok = self.layer_norm(g, &mut cache, tok, "embed_ln");
        tok = self.dropout(g, tok, &mut rng);

        let token_valid: Vec<bool> = w.valid.iter().flat_map(|&v| [v, v, v]).collect();
        let mask = causal_mask(&token_valid);
        tok = self.gpt_stack(g, &mut cache, tok, "", &mask, &mut rng)?;

        let hidden_s = g.stride_rows(tok, 1, 3);
        let logits = self.linear(g, &mut cache, hidden_s, "pred_a");
        let pred = g.tanh(logits);
        debug_assert_eq!(g.value(pred).dim(), (l, self.config.action_dim));
        let _ = d;
        Ok(pred)
    }

    fn z_embedding(
        &self,
        g: &mut Graph,
        cache: &mut ParamCache,
        w: &TokenWindow,
        rng: &mut Option<&mut ChaCha8Rng>,
        strategy: EncoderStrategy,
    ) -> Result<NodeId, ModelError> {
        match (&self.config.aggregator, &self.config.encoder) {
            (Aggregator::AntiCausalTransformer { .. }, _) => {
                let z_in = g.input(self.normalize(&w.z));
                self.anti_causal_embed(g, cache, z_in, &w.valid, rng)
            }
            (_, Some(_)) => {
                let normed = self.normalize(&w.z);
                let latents = match strategy {
                    // policy gradients stop at the latents unless training
                    // end-to-end / jointly
                    EncoderStrategy::Joint => {
                        let z_in = g.input(normed);
                        encoder::encode_graph(g, cache, &self.params, z_in)
                    }
                    EncoderStrategy::Unsup | EncoderStrategy::Frozen => {
                        let e2e = matches!(
                            self.config.encoder.as_ref().map(|e| e.kind),
                            Some(EncoderKind::E2e)
                        );
                        if e2e {
                            let z_in = g.input(normed);
                            encoder::encode_graph(g, cache, &self.params, z_in)
                        } else {
                            g.input(encoder::encode_plain(&self.params, &normed))
                        }
                    }
                };
                let valid_col = Array2::from_shape_fn((w.len(), 1), |(i, _)| {
                    if w.valid[i] {
                        1.0
                    } else {
                        0.0
                    }
                });
                let vmask = g.input(valid_col);
                let masked = g.mul_col(latents, vmask);
                let summed = g.sum_rows(masked);
                let replicated = g.broadcast_row(summed, w.len());
                Ok(self.linear(g, cache, replicated, "embed_z"))
            }
            _ => {
                let z_in = g.input(w.z.clone());
                Ok(self.linear(g, cache, z_in, "embed_z"))
            }
        }
    }

    /// Reverse, run the second causal transformer, re-align, project, embed.
    fn anti_causal_embed(
        &self,
        g: &mut Graph,
        cache: &mut ParamCache,
        z_states: NodeId,
        valid: &[bool],
        rng: &mut Option<&mut ChaCha8Rng>,
    ) -> Result<NodeId, ModelError> {
        let l = valid.len();
        let reversed = g.reverse_rows(z_states);
        let emb = self.linear(g, cache, reversed, "anti.embed");
        let table = cache.node(g, &self.params, "anti.pos.table");
        let positions: Vec<usize> = (0..l).collect();
        let pos = g.gather_rows(table, Arc::new(positions));
        let mut tok = g.add(emb, pos);
        // reversal puts padding after the real tokens, so the causal mask
        // already isolates them; mask them anyway to keep rows clean
        let rev_valid: Vec<bool> = valid.iter().rev().copied().collect();
        let mask = causal_mask(&rev_valid);
        tok = self.dropout(g, tok, rng);
        tok = self.gpt_stack(g, cache, tok, "anti.", &mask, rng)?;
        let latents = self.linear(g, cache, tok, "anti.head");
        let aligned = g.reverse_rows(latents);
        Ok(self.linear(g, cache, aligned, "embed_z"))
    }

    fn gpt_stack(
        &self,
        g: &mut Graph,
        cache: &mut ParamCache,
        mut x: NodeId,
        prefix: &str,
        mask: &Arc<Array2<bool>>,
        rng: &mut Option<&mut ChaCha8Rng>,
    ) -> Result<NodeId, ModelError> {
        for i in 0..self.config.n_layers {
            let ln1 = self.layer_norm(g, cache, x, &format!("{prefix}block{i}.ln1"));
            let attn = self.attention(g, cache, ln1, &format!("{prefix}block{i}.attn"), mask, rng);
            x = g.add(x, attn);
            let ln2 = self.layer_norm(g, cache, x, &format!("{prefix}block{i}.ln2"));
            let fc = self.linear(g, cache, ln2, &format!("{prefix}block{i}.mlp.fc"));
            let act = g.relu(fc);
            let proj = self.linear(g, cache, act, &format!("{prefix}block{i}.mlp.proj"));
            let proj = self.dropout(g, proj, rng);
            x = g.add(x, proj);
        }
        Ok(self.layer_norm(g, cache, x, &format!("{prefix}ln_f")))
    }

    fn attention(
        &self,
        g: &mut Graph,
        cache: &mut ParamCache,
        x: NodeId,
        prefix: &str,
        mask: &Arc<Array2<bool>>,
        rng: &mut Option<&mut ChaCha8Rng>,
    ) -> NodeId {
        let d = self.config.embed_dim;
        let dh = d / self.config.n_heads;
        let qkv = self.linear(g, cache, x, prefix);
        let mut heads = Vec::with_capacity(self.config.n_heads);
        for h in 0..self.config.n_heads {
            let q = g.slice_cols(qkv, h * dh, dh);
            let k = g.slice_cols(qkv, d + h * dh, dh);
            let v = g.slice_cols(qkv, 2 * d + h * dh, dh);
            let kt = g.transpose(k);
            let scores = g.matmul(q, kt);
            let scaled = g.scale(scores, 1.0 / (dh as f64).sqrt());
            let probs = g.masked_softmax_rows(scaled, mask.clone());
            let probs = self.dropout(g, probs, rng);
            heads.push(g.matmul(probs, v));
        }
        let cat = if heads.len() == 1 {
            heads[0]
        } else {
            g.concat_cols(heads)
        };
        let proj_name = prefix.replace(".attn", ".attn.proj");
        let w = cache.node(g, &self.params, &format!("{proj_name}.w"));
        let b = cache.node(g, &self.params, &format!("{proj_name}.b"));
        let mm = g.matmul(cat, w);
        let out = g.add_row(mm, b);
        self.dropout(g, out, rng)
    }

    fn linear(&self, g: &mut Graph, cache: &mut ParamCache, x: NodeId, name: &str) -> NodeId {
        let (w_name, b_name) = if name.ends_with(".attn") {
            (format!("{name}.qkv.w"), format!("{name}.qkv.b"))
        } else {
            (format!("{name}.w"), format!("{name}.b"))
        };
        let w = cache.node(g, &self.params, &w_name);
        let b = cache.node(g, &self.params, &b_name);
        let mm = g.matmul(x, w);
        g.add_row(mm, b)
    }

    fn layer_norm(&self, g: &mut Graph, cache: &mut ParamCache, x: NodeId, name: &str) -> NodeId {
        let gain = cache.node(g, &self.params, &format!("{name}.g"));
        let bias = cache.node(g, &self.params, &format!("{name}.b"));
        let n = g.norm_rows(x);
        let scaled = g.mul_row(n, gain);
        g.add_row(scaled, bias)
    }

    fn dropout(&self, g: &mut Graph, x: NodeId, rng: &mut Option<&mut ChaCha8Rng>) -> NodeId {
        let p = self.config.dropout;
        let Some(rng) = rng.as_deref_mut() else {
            return x;
        };
        if p == 0.0 {
            return x;
        }
        let dim = g.value(x).dim();
        let mask = g.input(dropout_mask(rng, dim, p));
        g.mul(x, mask)
    }
}

/// Elementwise sum of a window of latent feature rows; the z token for the
/// summation aggregator over learned features.
pub fn summarize_learned_phi(latents: ArrayView2<'_, f64>) -> Vec<f64> {
    let mut out = vec![0.0; latents.ncols()];
    for row in latents.rows() {
        for (acc, &v) in out.iter_mut().zip(row) {
            *acc += v;
        }
    }
    out
}

/// Inverted dropout mask: entries are `0` or `1 / (1 - p)`.
fn dropout_mask(rng: &mut ChaCha8Rng, (rows, cols): (usize, usize), p: f64) -> Array2<f64> {
    let threshold = (p * 4294967296.0) as u64;
    let keep = 1.0 / (1.0 - p);
    Array2::from_shape_simple_fn((rows, cols), || {
        if (rng.next_u32() as u64) < threshold {
            0.0
        } else {
            keep
        }
    })
}

/// `mask[i][j] = j <= i && valid[j]`.
fn causal_mask(token_valid: &[bool]) -> Arc<Array2<bool>> {
    let n = token_valid.len();
    Arc::new(Array2::from_shape_fn((n, n), |(i, j)| j <= i && token_valid[j]))
}

/// Per-graph memo of parameter nodes so each tensor appears once per tape.
struct ParamCache {
    ids: Vec<Option<NodeId>>,
}

impl ParamCache {
    fn new(n_params: usize) -> Self {
        ParamCache {
            ids: vec![None; n_params],
        }
    }

    fn node(&mut self, g: &mut Graph, ps: &ParamSet, name: &str) -> NodeId {
        let idx = ps.index(name);
        if let Some(id) = self.ids[idx] {
            return id;
        }
        let id = g.param(ps.entry(idx).value.clone(), idx);
        self.ids[idx] = Some(id);
        id
    }
}

pub use encoder::{ModelFeatureEncoder, ENCODER_PARAMS};

impl GdtModel {
    /// Wraps the trained encoder as a dataset feature function.
    pub fn as_feature_encoder(&self) -> Option<ModelFeatureEncoder<'_>> {
        self.config.encoder.as_ref().map(|enc| ModelFeatureEncoder {
            model: self,
            latent_dim: enc.latent_dim,
        })
    }
}

impl FeatureEncoder for ModelFeatureEncoder<'_> {
    fn encode(&self, state: &[f64]) -> Vec<f64> {
        let row = Array2::from_shape_vec((1, state.len()), state.to_vec()).expect("row");
        let normed = self.model.normalize(&row);
        let latent = encoder::encode_plain(&self.model.params, &normed);
        latent.row(0).to_vec()
    }

    fn latent_dim(&self) -> usize {
        self.latent_dim
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;

    fn tiny_config(aggregator: Aggregator, encoder: Option<EncoderConfig>) -> ModelConfig {
        let stat_kind = match (&aggregator, &encoder) {
            (Aggregator::Binning, _) => StatKind::Histogram,
            (Aggregator::AntiCausalTransformer { .. }, _) => StatKind::StateSequence,
            (_, Some(_)) => StatKind::StateSequence,
            _ => StatKind::Return,
        };
        ModelConfig {
            n_layers: 1,
            n_heads: 1,
            embed_dim: 8,
            context_len: 3,
            dropout: 0.1,
            max_horizon: 16,
            state_dim: 3,
            action_dim: 2,
            stat_dim: 1,
            stat_kind,
            aggregator,
            encoder,
            return_scale: 16.0,
        }
    }

    fn window(model: &GdtModel, l: usize, seed: u64) -> TokenWindow {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut rnd = |r: usize, c: usize| {
            Array2::from_shape_fn((r, c), |_| rand::Rng::random_range(&mut rng, -1.0..1.0))
        };
        TokenWindow {
            z: rnd(l, model.config.z_input_dim()),
            states: rnd(l, model.config.state_dim),
            actions: rnd(l, model.config.action_dim),
            timesteps: (0..l).collect(),
            valid: vec![true; l],
        }
    }

    #[test]
    fn forward_shape_contract() {
        let model = GdtModel::new(tiny_config(Aggregator::Summation, None), 0).unwrap();
        let w = window(&model, 1, 1);
        let pred = model.predict_actions(&w).unwrap();
        assert_eq!(pred.dim(), (1, 2));
        let w3 = window(&model, 3, 2);
        assert_eq!(model.predict_actions(&w3).unwrap().dim(), (3, 2));
    }

    #[test]
    fn zeroed_head_predicts_zero() {
        let mut model = GdtModel::new(tiny_config(Aggregator::Summation, None), 0).unwrap();
        model.params.set_value("pred_a.w", Array2::zeros((8, 2)));
        model.params.set_value("pred_a.b", Array2::zeros((1, 2)));
        let w = window(&model, 3, 3);
        let pred = model.predict_actions(&w).unwrap();
        assert!(pred.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn causal_future_perturbation_is_invisible() {
        let model = GdtModel::new(tiny_config(Aggregator::Binning, None), 1).unwrap();
        let mut cfg = model.config.clone();
        cfg.stat_dim = 4;
        let model = GdtModel::new(cfg, 1).unwrap();
        let base = window(&model, 3, 4);
        let pred = model.predict_actions(&base).unwrap();
        for t in 1..3 {
            let mut perturbed = base.clone();
            perturbed.z[[t, 0]] += 1.5;
            perturbed.states[[t, 1]] -= 2.0;
            perturbed.actions[[t, 0]] = 0.9;
            let p2 = model.predict_actions(&perturbed).unwrap();
            for earlier in 0..t {
                for a in 0..2 {
                    assert_eq!(pred[[earlier, a]], p2[[earlier, a]], "t={t} earlier={earlier}");
                }
            }
        }
    }

    #[test]
    fn anticausal_past_perturbation_is_invisible() {
        let model = GdtModel::new(
            tiny_config(Aggregator::AntiCausalTransformer { latent_dim: 4 }, None),
            2,
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let states =
            Array2::from_shape_fn((3, 3), |_| rand::Rng::random_range(&mut rng, -1.0..1.0));
        let base = model.aggregate_anticausal(&states).unwrap();
        let mut perturbed = states.clone();
        perturbed[[0, 0]] += 2.0;
        let out = model.aggregate_anticausal(&perturbed).unwrap();
        for t in 1..3 {
            for c in 0..base.ncols() {
                assert_eq!(base[[t, c]], out[[t, c]]);
            }
        }
        // suffix equality gives identical embeddings
        let mut tail_same = states.clone();
        tail_same[[0, 1]] = 0.77;
        let out2 = model.aggregate_anticausal(&tail_same).unwrap();
        assert_eq!(
            base.row(2).to_vec(),
            out2.row(2).to_vec(),
        );
        // single-step sequence works
        let single = model
            .aggregate_anticausal(&states.slice(ndarray::s![..1, ..]).to_owned())
            .unwrap();
        assert_eq!(single.nrows(), 1);
    }

    #[test]
    fn wrong_aggregator_rejected() {
        let model = GdtModel::new(tiny_config(Aggregator::Summation, None), 0).unwrap();
        let states = Array2::zeros((2, 3));
        assert!(matches!(
            model.aggregate_anticausal(&states),
            Err(ModelError::WrongAggregator { .. })
        ));
    }

    #[test]
    fn loss_zero_when_predictions_match() {
        let mut model = GdtModel::new(tiny_config(Aggregator::Summation, None), 0).unwrap();
        model.params.set_value("pred_a.w", Array2::zeros((8, 2)));
        model.params.set_value("pred_a.b", Array2::zeros((1, 2)));
        let mut w = window(&model, 2, 5);
        w.actions = Array2::zeros((2, 2));
        let (loss, grads) = model
            .bc_loss(std::slice::from_ref(&w), false, &[], EncoderStrategy::Frozen)
            .unwrap();
        assert_eq!(loss, 0.0);
        let head = grads.params[model.params.index("pred_a.w")].as_ref();
        assert!(head.is_none_or(|g| g.iter().all(|&x| x == 0.0)));
    }

    #[test]
    fn single_scalar_loss_value() {
        // one valid position, one action dim: pred 0 vs target 1 -> loss 1
        let mut cfg = tiny_config(Aggregator::Summation, None);
        cfg.action_dim = 1;
        let mut model = GdtModel::new(cfg, 0).unwrap();
        model.params.set_value("pred_a.w", Array2::zeros((8, 1)));
        model.params.set_value("pred_a.b", Array2::zeros((1, 1)));
        let mut w = window(&model, 1, 6);
        w.actions = Array2::from_elem((1, 1), 1.0);
        let (loss, _) = model
            .bc_loss(std::slice::from_ref(&w), false, &[], EncoderStrategy::Frozen)
            .unwrap();
        assert_eq!(loss, 1.0);
    }

    #[test]
    fn all_padding_batch_rejected() {
        let model = GdtModel::new(tiny_config(Aggregator::Summation, None), 0).unwrap();
        let mut w = window(&model, 2, 7);
        w.valid = vec![false, false];
        assert!(matches!(
            model.bc_loss(std::slice::from_ref(&w), false, &[], EncoderStrategy::Frozen),
            Err(ModelError::EmptyBatch)
        ));
    }

    #[test]
    fn deterministic_construction_and_loss() {
        let a = GdtModel::new(tiny_config(Aggregator::Summation, None), 42).unwrap();
        let b = GdtModel::new(tiny_config(Aggregator::Summation, None), 42).unwrap();
        for (ea, eb) in a.params.entries().iter().zip(b.params.entries()) {
            assert_eq!(ea.name, eb.name);
            assert_eq!(ea.value, eb.value);
        }
        let w = window(&a, 3, 8);
        let (la, _) = a
            .bc_loss(std::slice::from_ref(&w), true, &[11], EncoderStrategy::Frozen)
            .unwrap();
        let (lb, _) = b
            .bc_loss(std::slice::from_ref(&w), true, &[11], EncoderStrategy::Frozen)
            .unwrap();
        assert_eq!(la, lb);
    }

    #[test]
    fn param_count_matches_hand_formula() {
        let cfg = tiny_config(Aggregator::Summation, None);
        let model = GdtModel::new(cfg.clone(), 0).unwrap();
        let d = cfg.embed_dim;
        let per_block = 2 * d // ln1
            + d * 3 * d + 3 * d // qkv
            + d * d + d // attn proj
            + 2 * d // ln2
            + d * 4 * d + 4 * d // mlp fc
            + 4 * d * d + d; // mlp proj
        let expected = cfg.state_dim * d + d // embed_s
            + cfg.action_dim * d + d // embed_a
            + cfg.stat_dim * d + d // embed_z
            + cfg.max_horizon * d // embed_t
            + 2 * d // embed_ln
            + cfg.n_layers * per_block
            + 2 * d // ln_f
            + d * cfg.action_dim + cfg.action_dim; // pred_a
        assert_eq!(model.n_scalar_params(), expected);
    }

    #[test]
    fn config_validation() {
        let mut cfg = tiny_config(Aggregator::Summation, None);
        cfg.n_heads = 3; // 8 % 3 != 0
        assert!(GdtModel::new(cfg, 0).is_err());
        let mut cfg = tiny_config(Aggregator::Summation, None);
        cfg.dropout = 1.0;
        assert!(GdtModel::new(cfg, 0).is_err());
        let cfg = tiny_config(
            Aggregator::AntiCausalTransformer { latent_dim: 2 },
            Some(EncoderConfig::new(EncoderKind::Ae, 2)),
        );
        assert!(GdtModel::new(cfg, 0).is_err());
    }

    #[test]
    fn timestep_bounds_checked() {
        let model = GdtModel::new(tiny_config(Aggregator::Summation, None), 0).unwrap();
        let mut w = window(&model, 2, 9);
        w.timesteps = vec![0, 99];
        assert!(matches!(
            model.predict_actions(&w),
            Err(ModelError::TimestepOutOfRange { t: 99, .. })
        ));
    }

    #[test]
    fn summarize_phi_properties() {
        let one = Array2::from_shape_vec((1, 3), vec![0.5, -1.0, 2.0]).unwrap();
        assert_eq!(summarize_learned_phi(one.view()), vec![0.5, -1.0, 2.0]);
        let opposite =
            Array2::from_shape_vec((2, 2), vec![1.0, -2.0, -1.0, 2.0]).unwrap();
        assert_eq!(summarize_learned_phi(opposite.view()), vec![0.0, 0.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let w =
            Array2::from_shape_fn((4, 2), |_| rand::Rng::random_range(&mut rng, -1.0..1.0));
        let mut permuted = w.clone();
        permuted.swap((0, 0), (3, 0));
        permuted.swap((0, 1), (3, 1));
        let a = summarize_learned_phi(w.view());
        let b = summarize_learned_phi(permuted.view());
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn bc_gradients_match_finite_differences() {
        let mut model = GdtModel::new(tiny_config(Aggregator::Summation, None), 5).unwrap();
        gradcheck::offset_relu_biases(&mut model);
        let windows = vec![window(&model, 3, 20), window(&model, 2, 21)];
        let seeds = vec![100, 101];
        let margin =
            gradcheck::bc_relu_margin(&model, &windows, true, &seeds, EncoderStrategy::Frozen);
        assert!(margin > 0.05, "relu margin {margin} too small for fd");
        let eval = |m: &GdtModel| {
            m.bc_loss(&windows, true, &seeds, EncoderStrategy::Frozen)
                .unwrap()
                .0
        };
        let (_, grads) = model
            .bc_loss(&windows, true, &seeds, EncoderStrategy::Frozen)
            .unwrap();
        let report = gradcheck::check_gradients(&mut model, &grads, 1e-4, &eval);
        assert!(
            report.max_rel_error < 1e-4,
            "max rel err {} at {}",
            report.max_rel_error,
            report.worst
        );
    }

    #[test]
    fn multihead_gradients_match_finite_differences() {
        let mut cfg = tiny_config(Aggregator::Summation, None);
        cfg.n_heads = 2;
        cfg.dropout = 0.0;
        let mut model = GdtModel::new(cfg, 6).unwrap();
        let windows = vec![window(&model, 3, 22)];
        let eval = |m: &GdtModel| {
            m.bc_loss(&windows, false, &[], EncoderStrategy::Frozen)
                .unwrap()
                .0
        };
        let (_, grads) = model
            .bc_loss(&windows, false, &[], EncoderStrategy::Frozen)
            .unwrap();
        let report = gradcheck::check_gradients(&mut model, &grads, 1e-4, &eval);
        assert!(report.max_rel_error < 1e-4, "{}", report.worst);
    }

    #[test]
    fn padded_positions_do_not_leak() {
        // two windows identical on the valid suffix but different padding
        let model = GdtModel::new(tiny_config(Aggregator::Summation, None), 4).unwrap();
        let mut a = window(&model, 3, 10);
        a.valid = vec![false, true, true];
        a.timesteps = vec![0, 0, 1];
        let mut b = a.clone();
        b.z[[0, 0]] = 9.0;
        b.states[[0, 2]] = -7.0;
        b.actions[[0, 1]] = 1.0;
        let pa = model.predict_actions(&a).unwrap();
        let pb = model.predict_actions(&b).unwrap();
        for t in 1..3 {
            for c in 0..2 {
                assert_eq!(pa[[t, c]], pb[[t, c]]);
            }
        }
    }
}
