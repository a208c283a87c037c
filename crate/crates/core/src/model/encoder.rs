//! Learned feature functions: a small MLP encoder trained by state
//! reconstruction (AE) or a contrastive objective with a momentum key
//! encoder (CPC), plus the end-to-end variant that trains through the policy
//! loss alone.

use super::{GdtModel, ModelError, ParamCache, ParamSet};
use crate::autodiff::{Gradients, Graph, NodeId};
use ndarray::Array2;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

/// Encoder tensors in registry/checkpoint order; the CPC momentum encoder
/// mirrors exactly these.
pub const ENCODER_PARAMS: [&str; 6] = [
    "enc.l1.w", "enc.l1.b", "enc.l2.w", "enc.l2.b", "enc.l3.w", "enc.l3.b",
];

const DECODER_PARAMS: [&str; 6] = [
    "dec.l1.w", "dec.l1.b", "dec.l2.w", "dec.l2.b", "dec.l3.w", "dec.l3.b",
];

fn mlp_plain(weights: &[&Array2<f64>; 6], x: &Array2<f64>) -> Array2<f64> {
    let lin = |x: &Array2<f64>, w: &Array2<f64>, b: &Array2<f64>| x.dot(w) + b;
    let h1 = lin(x, weights[0], weights[1]).mapv(|v| v.max(0.0));
    let h2 = lin(&h1, weights[2], weights[3]).mapv(|v| v.max(0.0));
    lin(&h2, weights[4], weights[5])
}

/// Latents without a tape; used for frozen/stop-gradient paths.
pub(super) fn encode_plain(ps: &ParamSet, normed_states: &Array2<f64>) -> Array2<f64> {
    let w: Vec<&Array2<f64>> = ENCODER_PARAMS.iter().map(|n| ps.value(n).as_ref()).collect();
    mlp_plain(&[w[0], w[1], w[2], w[3], w[4], w[5]], normed_states)
}

fn encode_momentum(momentum: &[std::sync::Arc<Array2<f64>>], normed_states: &Array2<f64>) -> Array2<f64> {
    mlp_plain(
        &[
            &momentum[0], &momentum[1], &momentum[2], &momentum[3], &momentum[4], &momentum[5],
        ],
        normed_states,
    )
}

fn mlp_graph(
    g: &mut Graph,
    cache: &mut ParamCache,
    ps: &ParamSet,
    names: &[&str; 6],
    x: NodeId,
) -> NodeId {
    let mut h = x;
    for layer in 0..3 {
        let w = cache.node(g, ps, names[2 * layer]);
        let b = cache.node(g, ps, names[2 * layer + 1]);
        let mm = g.matmul(h, w);
        h = g.add_row(mm, b);
        if layer < 2 {
            h = g.relu(h);
        }
    }
    h
}

/// Differentiable encoder forward.
pub(super) fn encode_graph(g: &mut Graph, cache: &mut ParamCache, ps: &ParamSet, x: NodeId) -> NodeId {
    mlp_graph(g, cache, ps, &ENCODER_PARAMS, x)
}

/// Differentiable decoder forward.
pub(super) fn decode_graph(g: &mut Graph, cache: &mut ParamCache, ps: &ParamSet, x: NodeId) -> NodeId {
    mlp_graph(g, cache, ps, &DECODER_PARAMS, x)
}

/// The two independently noised views the contrastive loss consumes,
/// reproducible from the caller's rng state.
pub(super) fn contrastive_views(
    model: &GdtModel,
    states: &Array2<f64>,
    rng: &mut ChaCha8Rng,
) -> (Array2<f64>, Array2<f64>) {
    let sigma = model
        .config
        .encoder
        .as_ref()
        .map(|e| e.noise_std)
        .unwrap_or(0.1);
    let normed = model.normalize(states);
    let noise = Normal::new(0.0, sigma).expect("valid sigma");
    let mut noised = || {
        let mut out = normed.clone();
        out.mapv_inplace(|v| v + noise.sample(rng));
        out
    };
    let q = noised();
    let k = noised();
    (q, k)
}

/// Borrowed view of a trained encoder usable as a dataset feature function.
pub struct ModelFeatureEncoder<'a> {
    pub(crate) model: &'a GdtModel,
    pub(crate) latent_dim: usize,
}

impl GdtModel {
    /// Latents for raw states through the trained encoder (eval path).
    pub fn encode_states(&self, states: &Array2<f64>) -> Array2<f64> {
        encode_plain(&self.params, &self.normalize(states))
    }

    /// Decoder forward for AE inspection; latents in, state estimates out.
    pub fn decode_latents(&self, latents: &Array2<f64>) -> Array2<f64> {
        let w: Vec<&Array2<f64>> = DECODER_PARAMS
            .iter()
            .map(|n| self.params.value(n).as_ref())
            .collect();
        mlp_plain(&[w[0], w[1], w[2], w[3], w[4], w[5]], latents)
    }

    /// Reconstruction loss `mean_batch ||s - dec(enc(s))||^2` over raw
    /// states, with gradients for encoder and decoder.
    pub fn ae_loss(&self, states: &Array2<f64>) -> Result<(f64, Gradients), ModelError> {
        if !self.params.contains("dec.l1.w") {
            return Err(ModelError::Config("ae_loss needs an ae encoder".into()));
        }
        let normed = self.normalize(states);
        let mut g = Graph::new();
        let mut cache = ParamCache::new(self.params.len());
        let x = g.input(normed);
        let lat = encode_graph(&mut g, &mut cache, &self.params, x);
        let recon = mlp_graph(&mut g, &mut cache, &self.params, &DECODER_PARAMS, lat);
        let diff = g.sub(x, recon);
        let sq = g.mul(diff, diff);
        let total = g.sum_all(sq);
        let loss = g.scale(total, 1.0 / states.nrows() as f64);
        let grads = g.backward(loss, self.params.len());
        Ok((g.scalar(loss), grads))
    }

    /// InfoNCE with a bilinear score `q^T W k`: queries come from the live
    /// encoder on noised states, keys from the momentum encoder on
    /// independently noised states, negatives are the other batch elements.
    /// Gradients reach the encoder and `W`, never the momentum weights.
    pub fn cpc_loss(
        &self,
        states: &Array2<f64>,
        rng: &mut ChaCha8Rng,
    ) -> Result<(f64, Gradients), ModelError> {
        self.config
            .encoder
            .as_ref()
            .filter(|e| e.kind == super::EncoderKind::Cpc)
            .ok_or_else(|| ModelError::Config("cpc_loss needs a cpc encoder".into()))?;
        let momentum = self
            .momentum_encoder
            .as_ref()
            .expect("cpc models carry a momentum encoder");
        let b = states.nrows();
        if b < 2 {
            return Err(ModelError::NeedsNegatives);
        }
        let (q_in, k_in) = contrastive_views(self, states, rng);
        let keys = encode_momentum(momentum, &k_in);

        let mut g = Graph::new();
        let mut cache = ParamCache::new(self.params.len());
        let q_node = g.input(q_in);
        let q = encode_graph(&mut g, &mut cache, &self.params, q_node);
        let w = cache.node(&mut g, &self.params, "cpc.w");
        let qw = g.matmul(q, w);
        let k_node = g.input(keys);
        let kt = g.transpose(k_node);
        let logits = g.matmul(qw, kt);
        let lse = g.logsumexp_rows(logits);
        let pos = g.diag_col(logits);
        let per = g.sub(lse, pos);
        let total = g.sum_all(per);
        let loss = g.scale(total, 1.0 / b as f64);
        let grads = g.backward(loss, self.params.len());
        Ok((g.scalar(loss), grads))
    }

    /// `psi_tilde <- m * psi_tilde + (1 - m) * psi` after each step.
    pub fn momentum_update(&mut self) {
        let Some(momentum) = &mut self.momentum_encoder else {
            return;
        };
        let m = self
            .config
            .encoder
            .as_ref()
            .map(|e| e.momentum)
            .unwrap_or(0.95);
        for (slot, name) in momentum.iter_mut().zip(ENCODER_PARAMS) {
            let live = self.params.value(name);
            let mut updated = slot.as_ref().clone();
            updated.zip_mut_with(live, |t, &l| *t = m * *t + (1.0 - m) * l);
            *slot = std::sync::Arc::new(updated);
        }
    }
}
