//! Reverse-mode automatic differentiation over 2-D `f64` arrays.
//!
//! A [`Graph`] is a single-use tape: forward values are computed eagerly as
//! ops are recorded, and [`Graph::backward`] walks the tape once in reverse,
//! accumulating gradients for every parameter node. Parameters are shared
//! `Arc` arrays tagged with a registry key, so tapes never copy weights.

use ndarray::{Array2, ArrayView2, Axis};
use std::sync::Arc;

pub type NodeId = usize;

/// Node payload: owned intermediates or shared (parameter/constant) arrays.
enum Value {
    Owned(Array2<f64>),
    Shared(Arc<Array2<f64>>),
}

impl Value {
    fn view(&self) -> ArrayView2<'_, f64> {
        match self {
            Value::Owned(a) => a.view(),
            Value::Shared(a) => a.view(),
        }
    }
}

enum Op {
    Leaf,
    /// Leaf tied to a parameter registry key.
    Param(usize),
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    /// `(n, d) + (1, d)` broadcast over rows.
    AddRow(NodeId, NodeId),
    /// `(n, d) * (1, d)` broadcast over rows.
    MulRow(NodeId, NodeId),
    /// `(n, d) * (n, 1)` broadcast over columns.
    MulCol(NodeId, NodeId),
    Scale(NodeId, f64),
    Relu(NodeId),
    Tanh(NodeId),
    /// Rows normalized to zero mean, unit variance.
    NormRows(NodeId),
    /// Row softmax restricted to allowed entries; disallowed entries are
    /// exactly zero, rows with no allowed entry are all-zero.
    MaskedSoftmaxRows(NodeId, Arc<Array2<bool>>),
    Transpose(NodeId),
    SliceCols(NodeId, usize, usize),
    ConcatCols(Vec<NodeId>),
    /// Row lookup, used for embedding tables.
    GatherRows(NodeId, Arc<Vec<usize>>),
    /// Rows of three equal-shape inputs interleaved `a0 b0 c0 a1 b1 c1 ...`.
    Interleave3(NodeId, NodeId, NodeId),
    /// Rows `offset, offset + stride, ...`.
    StrideRows(NodeId, usize, usize),
    SumAll(NodeId),
    /// Column-wise sum onto a single row.
    SumRows(NodeId),
    /// `(1, d)` replicated to `(n, d)`.
    BroadcastRow(NodeId),
    ReverseRows(NodeId),
    /// Per-row `log(sum(exp(x)))` as a column vector.
    LogSumExpRows(NodeId),
    /// Main diagonal as a column vector.
    DiagCol(NodeId),
}

struct Node {
    op: Op,
    value: Value,
    needs_grad: bool,
}

const NORM_EPS: f64 = 1e-5;

/// Accumulated parameter gradients, indexed by registry key.
pub struct Gradients {
    pub params: Vec<Option<Array2<f64>>>,
}

impl Gradients {
    pub fn zeros(n_params: usize) -> Self {
        Gradients {
            params: (0..n_params).map(|_| None).collect(),
        }
    }

    /// `self += scale * other`, elementwise per parameter.
    pub fn add_scaled(&mut self, other: &Gradients, scale: f64) {
        for (slot, o) in self.params.iter_mut().zip(&other.params) {
            if let Some(og) = o {
                match slot {
                    Some(g) => g.scaled_add(scale, og),
                    None => *slot = Some(og * scale),
                }
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for g in self.params.iter_mut().flatten() {
            g.mapv_inplace(|x| x * factor);
        }
    }

    /// Global L2 norm over every stored gradient entry.
    pub fn global_norm(&self) -> f64 {
        self.params
            .iter()
            .flatten()
            .map(|g| g.iter().map(|x| x * x).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::with_capacity(128) }
    }

    fn push(&mut self, op: Op, value: Array2<f64>) -> NodeId {
        let needs_grad = match &op {
            Op::Leaf => false,
            Op::Param(_) => true,
            op => self.parents(op).iter().any(|&p| self.nodes[p].needs_grad),
        };
        self.nodes.push(Node {
            op,
            value: Value::Owned(value),
            needs_grad,
        });
        self.nodes.len() - 1
    }

    fn parents(&self, op: &Op) -> Vec<NodeId> {
        match op {
            Op::Leaf | Op::Param(_) => vec![],
            Op::MatMul(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::AddRow(a, b)
            | Op::MulRow(a, b)
            | Op::MulCol(a, b) => vec![*a, *b],
            Op::Interleave3(a, b, c) => vec![*a, *b, *c],
            Op::ConcatCols(ids) => ids.clone(),
            Op::Scale(a, _)
            | Op::Relu(a)
            | Op::Tanh(a)
            | Op::NormRows(a)
            | Op::MaskedSoftmaxRows(a, _)
            | Op::Transpose(a)
            | Op::SliceCols(a, _, _)
            | Op::GatherRows(a, _)
            | Op::StrideRows(a, _, _)
            | Op::SumAll(a)
            | Op::SumRows(a)
            | Op::BroadcastRow(a)
            | Op::ReverseRows(a)
            | Op::LogSumExpRows(a)
            | Op::DiagCol(a) => vec![*a],
        }
    }

    pub fn value(&self, id: NodeId) -> ArrayView2<'_, f64> {
        self.nodes[id].value.view()
    }

    pub fn scalar(&self, id: NodeId) -> f64 {
        self.value(id)[[0, 0]]
    }

    /// Constant input; gradients never flow into it.
    pub fn input(&mut self, value: Array2<f64>) -> NodeId {
        self.nodes.push(Node {
            op: Op::Leaf,
            value: Value::Owned(value),
            needs_grad: false,
        });
        self.nodes.len() - 1
    }

    /// Shared constant, typically a frozen parameter.
    pub fn shared(&mut self, value: Arc<Array2<f64>>) -> NodeId {
        self.nodes.push(Node {
            op: Op::Leaf,
            value: Value::Shared(value),
            needs_grad: false,
        });
        self.nodes.len() - 1
    }

    /// Trainable parameter leaf keyed into the registry.
    pub fn param(&mut self, value: Arc<Array2<f64>>, key: usize) -> NodeId {
        self.nodes.push(Node {
            op: Op::Param(key),
            value: Value::Shared(value),
            needs_grad: true,
        });
        self.nodes.len() - 1
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let value = self.value(a).dot(&self.value(b));
        self.push(Op::MatMul(a, b), value)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let value = &self.value(a) + &self.value(b);
        self.push(Op::Add(a, b), value)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let value = &self.value(a) - &self.value(b);
        self.push(Op::Sub(a, b), value)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let value = &self.value(a) * &self.value(b);
        self.push(Op::Mul(a, b), value)
    }

    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> NodeId {
        debug_assert_eq!(self.value(row).nrows(), 1);
        let value = &self.value(a) + &self.value(row);
        self.push(Op::AddRow(a, row), value)
    }

    pub fn mul_row(&mut self, a: NodeId, row: NodeId) -> NodeId {
        debug_assert_eq!(self.value(row).nrows(), 1);
        let value = &self.value(a) * &self.value(row);
        self.push(Op::MulRow(a, row), value)
    }

    pub fn mul_col(&mut self, a: NodeId, col: NodeId) -> NodeId {
        debug_assert_eq!(self.value(col).ncols(), 1);
        let value = &self.value(a) * &self.value(col);
        self.push(Op::MulCol(a, col), value)
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> NodeId {
        let value = self.value(a).mapv(|x| x * factor);
        self.push(Op::Scale(a, factor), value)
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).mapv(|x| x.max(0.0));
        self.push(Op::Relu(a), value)
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).mapv(f64::tanh);
        self.push(Op::Tanh(a), value)
    }

    pub fn norm_rows(&mut self, a: NodeId) -> NodeId {
        let x = self.value(a);
        let d = x.ncols() as f64;
        let mut out = x.to_owned();
        for mut row in out.rows_mut() {
            let mean = row.sum() / d;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / d;
            let rstd = 1.0 / (var + NORM_EPS).sqrt();
            row.mapv_inplace(|v| (v - mean) * rstd);
        }
        self.push(Op::NormRows(a), out)
    }

    pub fn masked_softmax_rows(&mut self, a: NodeId, mask: Arc<Array2<bool>>) -> NodeId {
        let x = self.value(a);
        debug_assert_eq!(x.dim(), mask.dim());
        let (n, m) = x.dim();
        let mut out = Array2::zeros((n, m));
        for i in 0..n {
            let mut max = f64::NEG_INFINITY;
            for j in 0..m {
                if mask[[i, j]] {
                    max = max.max(x[[i, j]]);
                }
            }
            if max == f64::NEG_INFINITY {
                continue; // fully masked row stays zero
            }
            let mut total = 0.0;
            for j in 0..m {
                if mask[[i, j]] {
                    let e = (x[[i, j]] - max).exp();
                    out[[i, j]] = e;
                    total += e;
                }
            }
            for j in 0..m {
                out[[i, j]] /= total;
            }
        }
        self.push(Op::MaskedSoftmaxRows(a, mask), out)
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).t().to_owned();
        self.push(Op::Transpose(a), value)
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, len: usize) -> NodeId {
        let value = self
            .value(a)
            .slice(ndarray::s![.., start..start + len])
            .to_owned();
        self.push(Op::SliceCols(a, start, len), value)
    }

    pub fn concat_cols(&mut self, ids: Vec<NodeId>) -> NodeId {
        let views: Vec<ArrayView2<f64>> = ids.iter().map(|&id| self.value(id)).collect();
        let value = ndarray::concatenate(Axis(1), &views).expect("compatible shapes");
        self.push(Op::ConcatCols(ids), value)
    }

    pub fn gather_rows(&mut self, a: NodeId, indices: Arc<Vec<usize>>) -> NodeId {
        let x = self.value(a);
        let mut out = Array2::zeros((indices.len(), x.ncols()));
        for (r, &idx) in indices.iter().enumerate() {
            out.row_mut(r).assign(&x.row(idx));
        }
        self.push(Op::GatherRows(a, indices), out)
    }

    pub fn interleave3(&mut self, a: NodeId, b: NodeId, c: NodeId) -> NodeId {
        let (va, vb, vc) = (self.value(a), self.value(b), self.value(c));
        let (n, d) = va.dim();
        debug_assert_eq!(vb.dim(), (n, d));
        debug_assert_eq!(vc.dim(), (n, d));
        let mut out = Array2::zeros((3 * n, d));
        for t in 0..n {
            out.row_mut(3 * t).assign(&va.row(t));
            out.row_mut(3 * t + 1).assign(&vb.row(t));
            out.row_mut(3 * t + 2).assign(&vc.row(t));
        }
        self.push(Op::Interleave3(a, b, c), out)
    }

    pub fn stride_rows(&mut self, a: NodeId, offset: usize, stride: usize) -> NodeId {
        let x = self.value(a);
        let rows: Vec<usize> = (offset..x.nrows()).step_by(stride).collect();
        let mut out = Array2::zeros((rows.len(), x.ncols()));
        for (r, &idx) in rows.iter().enumerate() {
            out.row_mut(r).assign(&x.row(idx));
        }
        self.push(Op::StrideRows(a, offset, stride), out)
    }

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let total = self.value(a).sum();
        self.push(Op::SumAll(a), Array2::from_elem((1, 1), total))
    }

    pub fn sum_rows(&mut self, a: NodeId) -> NodeId {
        let value = self
            .value(a)
            .sum_axis(Axis(0))
            .insert_axis(Axis(0))
            .to_owned();
        self.push(Op::SumRows(a), value)
    }

    pub fn broadcast_row(&mut self, a: NodeId, n: usize) -> NodeId {
        let row = self.value(a);
        debug_assert_eq!(row.nrows(), 1);
        let value = row
            .broadcast((n, row.ncols()))
            .expect("broadcast row")
            .to_owned();
        self.push(Op::BroadcastRow(a), value)
    }

    pub fn reverse_rows(&mut self, a: NodeId) -> NodeId {
        let x = self.value(a);
        let value = x.slice(ndarray::s![..;-1, ..]).to_owned();
        self.push(Op::ReverseRows(a), value)
    }

    pub fn logsumexp_rows(&mut self, a: NodeId) -> NodeId {
        let x = self.value(a);
        let mut out = Array2::zeros((x.nrows(), 1));
        for (i, row) in x.rows().into_iter().enumerate() {
            let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
            let total: f64 = row.iter().map(|&v| (v - max).exp()).sum();
            out[[i, 0]] = max + total.ln();
        }
        self.push(Op::LogSumExpRows(a), out)
    }

    pub fn diag_col(&mut self, a: NodeId) -> NodeId {
        let x = self.value(a);
        let n = x.nrows().min(x.ncols());
        let mut out = Array2::zeros((n, 1));
        for i in 0..n {
            out[[i, 0]] = x[[i, i]];
        }
        self.push(Op::DiagCol(a), out)
    }

    /// Smallest absolute relu input anywhere on the tape. Finite-difference
    /// checks need this margin to exceed the perturbation's reach, otherwise
    /// the difference quotient straddles a kink.
    pub fn min_abs_relu_input(&self) -> f64 {
        let mut min = f64::INFINITY;
        for node in &self.nodes {
            if let Op::Relu(a) = node.op {
                for &v in self.value(a).iter() {
                    min = min.min(v.abs());
                }
            }
        }
        min
    }

    /// Backpropagates from `root` (seeded with ones) and returns gradients
    /// for every parameter key below `n_params`.
    pub fn backward(&self, root: NodeId, n_params: usize) -> Gradients {
        let mut node_grads: Vec<Option<Array2<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        node_grads[root] = Some(Array2::ones(self.value(root).dim()));

        for id in (0..=root).rev() {
            if !self.nodes[id].needs_grad && !matches!(self.nodes[id].op, Op::Param(_)) {
                continue;
            }
            let Some(grad) = node_grads[id].take() else {
                continue;
            };
            self.backprop_one(id, &grad, &mut node_grads);
            node_grads[id] = Some(grad);
        }

        let mut out = Gradients::zeros(n_params);
        for (id, node) in self.nodes.iter().enumerate() {
            if let Op::Param(key) = node.op {
                if let Some(g) = node_grads[id].take() {
                    match &mut out.params[key] {
                        Some(acc) => *acc += &g,
                        slot => *slot = Some(g),
                    }
                }
            }
        }
        out
    }

    fn backprop_one(&self, id: NodeId, grad: &Array2<f64>, node_grads: &mut [Option<Array2<f64>>]) {
        let accum = |slot: &mut Option<Array2<f64>>, delta: Array2<f64>| match slot {
            Some(g) => *g += &delta,
            slot => *slot = Some(delta),
        };
        let needs = |p: NodeId| self.nodes[p].needs_grad;

        match &self.nodes[id].op {
            Op::Leaf | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                if needs(*a) {
                    accum(&mut node_grads[*a], grad.dot(&self.value(*b).t()));
                }
                if needs(*b) {
                    accum(&mut node_grads[*b], self.value(*a).t().dot(grad));
                }
            }
            Op::Add(a, b) => {
                if needs(*a) {
                    accum(&mut node_grads[*a], grad.clone());
                }
                if needs(*b) {
                    accum(&mut node_grads[*b], grad.clone());
                }
            }
            Op::Sub(a, b) => {
                if needs(*a) {
                    accum(&mut node_grads[*a], grad.clone());
                }
                if needs(*b) {
                    accum(&mut node_grads[*b], grad.mapv(|x| -x));
                }
            }
            Op::Mul(a, b) => {
                if needs(*a) {
                    accum(&mut node_grads[*a], grad * &self.value(*b));
                }
                if needs(*b) {
                    accum(&mut node_grads[*b], grad * &self.value(*a));
                }
            }
            Op::AddRow(a, row) => {
                if needs(*a) {
                    accum(&mut node_grads[*a], grad.clone());
                }
                if needs(*row) {
                    accum(
                        &mut node_grads[*row],
                        grad.sum_axis(Axis(0)).insert_axis(Axis(0)),
                    );
                }
            }
            Op::MulRow(a, row) => {
                if needs(*a) {
                    accum(&mut node_grads[*a], grad * &self.value(*row));
                }
                if needs(*row) {
                    let d = (grad * &self.value(*a)).sum_axis(Axis(0)).insert_axis(Axis(0));
                    accum(&mut node_grads[*row], d);
                }
            }
            Op::MulCol(a, col) => {
                if needs(*a) {
                    accum(&mut node_grads[*a], grad * &self.value(*col));
                }
                if needs(*col) {
                    let d = (grad * &self.value(*a)).sum_axis(Axis(1)).insert_axis(Axis(1));
                    accum(&mut node_grads[*col], d);
                }
            }
            Op::Scale(a, factor) => {
                if needs(*a) {
                    accum(&mut node_grads[*a], grad.mapv(|x| x * factor));
                }
            }
            Op::Relu(a) => {
                if needs(*a) {
                    let x = self.value(*a);
                    let mut d = grad.clone();
                    d.zip_mut_with(&x, |g, &v| {
                        if v <= 0.0 {
                            *g = 0.0;
                        }
                    });
                    accum(&mut node_grads[*a], d);
                }
            }
            Op::Tanh(a) => {
                if needs(*a) {
                    let y = self.value(id);
                    let mut d = grad.clone();
                    d.zip_mut_with(&y, |g, &t| *g *= 1.0 - t * t);
                    accum(&mut node_grads[*a], d);
                }
            }
            Op::NormRows(a) => {
                if needs(*a) {
                    let x = self.value(*a);
                    let y = self.value(id);
                    let d = x.ncols() as f64;
                    let mut dx = Array2::zeros(x.dim());
                    for i in 0..x.nrows() {
                        let xrow = x.row(i);
                        let yrow = y.row(i);
                        let grow = grad.row(i);
                        let mean = xrow.sum() / d;
                        let var = xrow.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / d;
                        let rstd = 1.0 / (var + NORM_EPS).sqrt();
                        let g_mean = grow.sum() / d;
                        let gy_mean = grow
                            .iter()
                            .zip(yrow.iter())
                            .map(|(&g, &yv)| g * yv)
                            .sum::<f64>()
                            / d;
                        for j in 0..x.ncols() {
                            dx[[i, j]] = (grow[j] - g_mean - yrow[j] * gy_mean) * rstd;
                        }
                    }
                    accum(&mut node_grads[*a], dx);
                }
            }
            Op::MaskedSoftmaxRows(a, mask) => {
                if needs(*a) {
                    let y = self.value(id);
                    let (n, m) = y.dim();
                    let mut dx = Array2::zeros((n, m));
                    for i in 0..n {
                        let mut dot = 0.0;
                        for j in 0..m {
                            dot += grad[[i, j]] * y[[i, j]];
                        }
                        for j in 0..m {
                            if mask[[i, j]] {
                                dx[[i, j]] = y[[i, j]] * (grad[[i, j]] - dot);
                            }
                        }
                    }
                    accum(&mut node_grads[*a], dx);
                }
            }
            Op::Transpose(a) => {
                if needs(*a) {
                    accum(&mut node_grads[*a], grad.t().to_owned());
                }
            }
            Op::SliceCols(a, start, len) => {
                if needs(*a) {
                    let x = self.value(*a);
                    let mut dx = Array2::zeros(x.dim());
                    dx.slice_mut(ndarray::s![.., *start..start + len]).assign(grad);
                    accum(&mut node_grads[*a], dx);
                }
            }
            Op::ConcatCols(ids) => {
                let mut offset = 0;
                for &part in ids {
                    let w = self.value(part).ncols();
                    if needs(part) {
                        let d = grad.slice(ndarray::s![.., offset..offset + w]).to_owned();
                        accum(&mut node_grads[part], d);
                    }
                    offset += w;
                }
            }
            Op::GatherRows(a, indices) => {
                if needs(*a) {
                    let x = self.value(*a);
                    let mut dx = Array2::zeros(x.dim());
                    for (r, &idx) in indices.iter().enumerate() {
                        let mut row = dx.row_mut(idx);
                        row += &grad.row(r);
                    }
                    accum(&mut node_grads[*a], dx);
                }
            }
            Op::Interleave3(a, b, c) => {
                let n = self.value(*a).nrows();
                for (k, &src) in [*a, *b, *c].iter().enumerate() {
                    if needs(src) {
                        let mut d = Array2::zeros(self.value(src).dim());
                        for t in 0..n {
                            d.row_mut(t).assign(&grad.row(3 * t + k));
                        }
                        accum(&mut node_grads[src], d);
                    }
                }
            }
            Op::StrideRows(a, offset, stride) => {
                if needs(*a) {
                    let x = self.value(*a);
                    let mut dx = Array2::zeros(x.dim());
                    for (r, idx) in (*offset..x.nrows()).step_by(*stride).enumerate() {
                        dx.row_mut(idx).assign(&grad.row(r));
                    }
                    accum(&mut node_grads[*a], dx);
                }
            }
            Op::SumAll(a) => {
                if needs(*a) {
                    let g = grad[[0, 0]];
                    accum(&mut node_grads[*a], Array2::from_elem(self.value(*a).dim(), g));
                }
            }
            Op::SumRows(a) => {
                if needs(*a) {
                    let n = self.value(*a).nrows();
                    let d = grad
                        .broadcast((n, grad.ncols()))
                        .expect("broadcast")
                        .to_owned();
                    accum(&mut node_grads[*a], d);
                }
            }
            Op::BroadcastRow(a) => {
                if needs(*a) {
                    accum(
                        &mut node_grads[*a],
                        grad.sum_axis(Axis(0)).insert_axis(Axis(0)),
                    );
                }
            }
            Op::ReverseRows(a) => {
                if needs(*a) {
                    accum(&mut node_grads[*a], grad.slice(ndarray::s![..;-1, ..]).to_owned());
                }
            }
            Op::LogSumExpRows(a) => {
                if needs(*a) {
                    let x = self.value(*a);
                    let y = self.value(id);
                    let mut dx = Array2::zeros(x.dim());
                    for i in 0..x.nrows() {
                        let g = grad[[i, 0]];
                        for j in 0..x.ncols() {
                            dx[[i, j]] = g * (x[[i, j]] - y[[i, 0]]).exp();
                        }
                    }
                    accum(&mut node_grads[*a], dx);
                }
            }
            Op::DiagCol(a) => {
                if needs(*a) {
                    let mut dx = Array2::zeros(self.value(*a).dim());
                    for i in 0..grad.nrows() {
                        dx[[i, i]] = grad[[i, 0]];
                    }
                    accum(&mut node_grads[*a], dx);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Central finite differences for a scalar-valued graph builder.
    fn numeric_grad(
        build: &dyn Fn(&mut Graph, &[Arc<Array2<f64>>]) -> NodeId,
        params: &[Array2<f64>],
        key: usize,
        i: usize,
        j: usize,
    ) -> f64 {
        let eps = 1e-6;
        let eval = |delta: f64| {
            let mut shifted: Vec<Arc<Array2<f64>>> =
                params.iter().map(|p| Arc::new(p.clone())).collect();
            let mut p = params[key].clone();
            p[[i, j]] += delta;
            shifted[key] = Arc::new(p);
            let mut g = Graph::new();
            let root = build(&mut g, &shifted);
            g.scalar(root)
        };
        (eval(eps) - eval(-eps)) / (2.0 * eps)
    }

    fn check_all(build: &dyn Fn(&mut Graph, &[Arc<Array2<f64>>]) -> NodeId, params: &[Array2<f64>]) {
        let arcs: Vec<Arc<Array2<f64>>> = params.iter().map(|p| Arc::new(p.clone())).collect();
        let mut g = Graph::new();
        let root = build(&mut g, &arcs);
        let grads = g.backward(root, params.len());
        for (key, p) in params.iter().enumerate() {
            let analytic = grads.params[key]
                .clone()
                .unwrap_or_else(|| Array2::zeros(p.dim()));
            for i in 0..p.nrows() {
                for j in 0..p.ncols() {
                    let num = numeric_grad(build, params, key, i, j);
                    let a = analytic[[i, j]];
                    let denom = a.abs().max(num.abs()).max(1.0);
                    assert!(
                        (a - num).abs() / denom < 1e-6,
                        "param {key} [{i},{j}]: analytic {a} vs numeric {num}"
                    );
                }
            }
        }
    }

    fn rand_mat(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Array2<f64> {
        Array2::from_shape_fn((r, c), |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn matmul_chain_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let params = vec![rand_mat(&mut rng, 3, 4), rand_mat(&mut rng, 4, 2)];
        check_all(
            &|g, p| {
                let a = g.param(p[0].clone(), 0);
                let b = g.param(p[1].clone(), 1);
                let y = g.matmul(a, b);
                let t = g.tanh(y);
                g.sum_all(t)
            },
            &params,
        );
    }

    #[test]
    fn elementwise_and_broadcast_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let params = vec![
            rand_mat(&mut rng, 3, 4),
            rand_mat(&mut rng, 1, 4),
            rand_mat(&mut rng, 3, 1),
        ];
        check_all(
            &|g, p| {
                let a = g.param(p[0].clone(), 0);
                let row = g.param(p[1].clone(), 1);
                let col = g.param(p[2].clone(), 2);
                let x = g.add_row(a, row);
                let x = g.mul_row(x, row);
                let x = g.mul_col(x, col);
                let x = g.relu(x);
                let x = g.scale(x, 0.7);
                g.sum_all(x)
            },
            &params,
        );
    }

    #[test]
    fn norm_rows_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let params = vec![rand_mat(&mut rng, 4, 5)];
        check_all(
            &|g, p| {
                let a = g.param(p[0].clone(), 0);
                let n = g.norm_rows(a);
                let sq = g.mul(n, n);
                g.sum_all(sq)
            },
            &params,
        );
    }

    #[test]
    fn masked_softmax_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let params = vec![rand_mat(&mut rng, 4, 4)];
        let mask = Arc::new(Array2::from_shape_fn((4, 4), |(i, j)| j <= i));
        check_all(
            &|g, p| {
                let a = g.param(p[0].clone(), 0);
                let sm = g.masked_softmax_rows(a, mask.clone());
                let sq = g.mul(sm, sm);
                g.sum_all(sq)
            },
            &params,
        );
    }

    #[test]
    fn structural_op_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let params = vec![rand_mat(&mut rng, 4, 6), rand_mat(&mut rng, 4, 6)];
        check_all(
            &|g, p| {
                let a = g.param(p[0].clone(), 0);
                let b = g.param(p[1].clone(), 1);
                let inter = g.interleave3(a, b, a);
                let s = g.stride_rows(inter, 1, 3);
                let left = g.slice_cols(s, 0, 3);
                let right = g.slice_cols(s, 3, 3);
                let cat = g.concat_cols(vec![left, right]);
                let rev = g.reverse_rows(cat);
                let t = g.transpose(rev);
                let tt = g.tanh(t);
                g.sum_all(tt)
            },
            &params,
        );
    }

    #[test]
    fn gather_and_reduce_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let params = vec![rand_mat(&mut rng, 5, 3)];
        let idx = Arc::new(vec![0usize, 2, 2, 4]);
        check_all(
            &|g, p| {
                let table = g.param(p[0].clone(), 0);
                let rows = g.gather_rows(table, idx.clone());
                let summed = g.sum_rows(rows);
                let b = g.broadcast_row(summed, 3);
                let t = g.tanh(b);
                g.sum_all(t)
            },
            &params,
        );
    }

    #[test]
    fn logsumexp_diag_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let params = vec![rand_mat(&mut rng, 4, 4)];
        check_all(
            &|g, p| {
                let a = g.param(p[0].clone(), 0);
                let lse = g.logsumexp_rows(a);
                let diag = g.diag_col(a);
                let d = g.sub(lse, diag);
                g.sum_all(d)
            },
            &params,
        );
    }

    #[test]
    fn param_reuse_accumulates() {
        let p = array![[2.0]];
        let mut g = Graph::new();
        let a = g.param(Arc::new(p), 0);
        let sq = g.mul(a, a); // d/dp (p^2) = 2p = 4
        let grads = g.backward(sq, 1);
        assert_eq!(grads.params[0].as_ref().unwrap()[[0, 0]], 4.0);
    }

    #[test]
    fn fully_masked_row_is_zero() {
        let mut g = Graph::new();
        let a = g.input(array![[1.0, 2.0], [3.0, 4.0]]);
        let mask = Arc::new(array![[false, false], [true, true]]);
        let sm = g.masked_softmax_rows(a, mask);
        assert_eq!(g.value(sm).row(0).to_vec(), vec![0.0, 0.0]);
        let total: f64 = g.value(sm).row(1).sum();
        assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn no_grad_paths_are_skipped() {
        let mut g = Graph::new();
        let a = g.input(array![[1.0, 2.0]]);
        let b = g.param(Arc::new(array![[3.0, 4.0]]), 0);
        let prod = g.mul(a, b);
        let s = g.sum_all(prod);
        let grads = g.backward(s, 1);
        assert_eq!(grads.params[0].as_ref().unwrap(), &array![[1.0, 2.0]]);
    }
}
