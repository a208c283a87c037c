//! Central finite-difference verification of the analytic gradients.
//!
//! Perturbs every parameter entry by `±eps`, re-evaluates the loss, and
//! compares against the reverse-mode result. Callers must make the loss a
//! deterministic function of the model (fixed batches, fixed dropout seeds).

use super::{encoder, EncoderStrategy, GdtModel, ParamCache, TokenWindow};
use crate::autodiff::{Gradients, Graph};
use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Smallest relu margin across the forward graphs of a behavioral-cloning
/// batch. Checks should only run where this comfortably exceeds the
/// finite-difference step.
pub fn bc_relu_margin(
    model: &GdtModel,
    windows: &[TokenWindow],
    train: bool,
    seeds: &[u64],
    strategy: EncoderStrategy,
) -> f64 {
    let mut margin = f64::INFINITY;
    for (i, w) in windows.iter().enumerate() {
        let mut rng = if train {
            Some(ChaCha8Rng::seed_from_u64(seeds[i]))
        } else {
            None
        };
        let mut g = Graph::new();
        model
            .build_forward(&mut g, w, rng.as_mut(), strategy)
            .expect("margin probe forward");
        margin = margin.min(g.min_abs_relu_input());
    }
    margin
}

/// Relu margin of the auto-encoder loss graph.
pub fn ae_relu_margin(model: &GdtModel, states: &Array2<f64>) -> f64 {
    let mut g = Graph::new();
    let mut cache = ParamCache::new(model.params.len());
    let x = g.input(model.normalize(states));
    let lat = encoder::encode_graph(&mut g, &mut cache, &model.params, x);
    encoder::decode_graph(&mut g, &mut cache, &model.params, lat);
    g.min_abs_relu_input()
}

/// Relu margin of the query-encoder path of the contrastive loss, for the
/// exact noised views a given rng seed produces.
pub fn cpc_relu_margin(model: &GdtModel, states: &Array2<f64>, noise_seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(noise_seed);
    let (q_in, _) = encoder::contrastive_views(model, states, &mut rng);
    let mut g = Graph::new();
    let mut cache = ParamCache::new(model.params.len());
    let x = g.input(q_in);
    encoder::encode_graph(&mut g, &mut cache, &model.params, x);
    g.min_abs_relu_input()
}

/// Moves every relu pre-activation away from zero by giving the biases that
/// feed relus alternating `+/-0.25` offsets. Initialized weights are `O(0.02)`
/// scale, so this leaves each unit firmly active or firmly inactive — both
/// branches stay exercised and no finite difference can straddle a kink.
pub fn offset_relu_biases(model: &mut GdtModel) {
    let names: Vec<String> = model
        .params
        .entries()
        .iter()
        .map(|e| e.name.clone())
        .filter(|n| n.ends_with("mlp.fc.b") || n == "enc.l1.b" || n == "enc.l2.b" || n == "dec.l1.b" || n == "dec.l2.b")
        .collect();
    for name in names {
        let idx = model.params.index(&name);
        let value = model.params.value_mut(idx);
        for (j, v) in value.iter_mut().enumerate() {
            *v = if j % 2 == 0 { 0.25 } else { -0.25 };
        }
    }
}

#[derive(Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub n_checked: usize,
    pub worst: String,
}

/// Relative error scaled by `max(|analytic|, |numeric|, 1)`, so near-zero
/// gradients are compared absolutely.
pub fn check_gradients(
    model: &mut GdtModel,
    analytic: &Gradients,
    eps: f64,
    loss: &dyn Fn(&GdtModel) -> f64,
) -> GradCheckReport {
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        n_checked: 0,
        worst: String::new(),
    };
    for idx in 0..model.params.len() {
        let name = model.params.entry(idx).name.clone();
        let (rows, cols) = model.params.entry(idx).value.dim();
        for i in 0..rows {
            for j in 0..cols {
                let original = model.params.entry(idx).value[[i, j]];
                model.params.value_mut(idx)[[i, j]] = original + eps;
                let up = loss(model);
                model.params.value_mut(idx)[[i, j]] = original - eps;
                let down = loss(model);
                model.params.value_mut(idx)[[i, j]] = original;
                let numeric = (up - down) / (2.0 * eps);
                let a = analytic.params[idx]
                    .as_ref()
                    .map_or(0.0, |g| g[[i, j]]);
                let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1.0);
                report.n_checked += 1;
                if rel > report.max_rel_error {
                    report.max_rel_error = rel;
                    report.worst = format!("{name}[{i},{j}]: analytic {a} vs numeric {numeric}");
                }
            }
        }
    }
    report
}
