//! Reverse-mode differentiation over a recorded tape of matrix operations.
//!
//! A [`Graph`] is built fresh for every forward pass. Parameters enter as
//! leaves via [`Graph::param`]; each parameter maps to exactly one leaf per
//! graph, so reuse inside a forward pass accumulates into a single gradient.
//!
//! Leaf gradients persist on the graph: calling [`Graph::backward`] twice
//! adds the second pass on top of the first, doubling every leaf gradient.
//! [`Graph::zero_grad`] clears them.

use std::collections::HashMap;

use super::params::{GradMap, ParamId, ParamStore};
use super::tensor::{matmul_nt_into, matmul_tn_into, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Silu(Var),
    Tanh(Var),
    SoftmaxRows(Var),
    Transpose(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    MeanRows(Var),
    BroadcastRows(Var),
    Sum(Var),
    Mean(Var),
    Square(Var),
    Abs(Var),
    CrossEntropy(Var, usize),
    StraightThrough(Var),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// The computation tape. Nodes are appended in evaluation order, so the
/// node list is always topologically sorted.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
    leaf_grads: HashMap<usize, Vec<f64>>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// A leaf that never receives gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A leaf that accumulates gradient.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// The leaf bound to parameter `id` (created on first use).
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.leaf(store.get(id).clone());
        self.params.insert(id, v);
        v
    }

    /// Copy of `v`'s value with no gradient path.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::MatMul(a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Mul(a, b), rg))
    }

    /// `a[r×c] + b[1×c]` with `b` broadcast over rows.
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if bv.rows() != 1 || bv.cols() != av.cols() {
            return Err(Error::Shape {
                op: "add_row",
                lhs: av.shape().to_vec(),
                rhs: bv.shape().to_vec(),
            });
        }
        let c = av.cols();
        let mut data = av.data().to_vec();
        for (i, x) in data.iter_mut().enumerate() {
            *x += bv.data()[i % c];
        }
        let value = Tensor::matrix(av.rows(), c, data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::AddRow(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let value = self.value(a).map(|x| x * factor);
        let rg = self.rg(&[a]);
        self.push(value, Op::Scale(a, factor), rg)
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x * sigmoid(x));
        let rg = self.rg(&[a]);
        self.push(value, Op::Silu(a), rg)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::tanh);
        let rg = self.rg(&[a]);
        self.push(value, Op::Tanh(a), rg)
    }

    pub fn square(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x * x);
        let rg = self.rg(&[a]);
        self.push(value, Op::Square(a), rg)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::abs);
        let rg = self.rg(&[a]);
        self.push(value, Op::Abs(a), rg)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let (r, c) = (av.rows(), av.cols());
        let mut data = av.data().to_vec();
        for row in data.chunks_mut(c) {
            softmax_in_place(row);
        }
        let value = Tensor::matrix(r, c, data).expect("shape preserved");
        let rg = self.rg(&[a]);
        self.push(value, Op::SoftmaxRows(a), rg)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).transpose();
        let rg = self.rg(&[a]);
        self.push(value, Op::Transpose(a), rg)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = self.value(parts[0]).rows();
        let mut cols = 0;
        for &p in parts {
            let pv = self.value(p);
            if pv.rows() != rows {
                return Err(Error::Shape {
                    op: "concat_cols",
                    lhs: self.value(parts[0]).shape().to_vec(),
                    rhs: pv.shape().to_vec(),
                });
            }
            cols += pv.cols();
        }
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row_slice(r));
            }
        }
        let value = Tensor::matrix(rows, cols, data)?;
        let rg = self.rg(parts);
        Ok(self.push(value, Op::ConcatCols(parts.to_vec()), rg))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = self.value(parts[0]).cols();
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let pv = self.value(p);
            if pv.cols() != cols {
                return Err(Error::Shape {
                    op: "concat_rows",
                    lhs: self.value(parts[0]).shape().to_vec(),
                    rhs: pv.shape().to_vec(),
                });
            }
            rows += pv.rows();
            data.extend_from_slice(pv.data());
        }
        let value = Tensor::matrix(rows, cols, data)?;
        let rg = self.rg(parts);
        Ok(self.push(value, Op::ConcatRows(parts.to_vec()), rg))
    }

    /// Rows `start..start + len`.
    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let av = self.value(a);
        if start + len > av.rows() || len == 0 {
            return Err(Error::Bounds {
                what: "slice_rows",
                index: start + len,
                len: av.rows(),
            });
        }
        let c = av.cols();
        let value = Tensor::matrix(len, c, av.data()[start * c..(start + len) * c].to_vec())?;
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::SliceRows(a, start), rg))
    }

    /// Columns `start..start + len`.
    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let av = self.value(a);
        if start + len > av.cols() || len == 0 {
            return Err(Error::Bounds {
                what: "slice_cols",
                index: start + len,
                len: av.cols(),
            });
        }
        let data = (0..av.rows())
            .flat_map(|r| av.row_slice(r)[start..start + len].to_vec())
            .collect();
        let value = Tensor::matrix(av.rows(), len, data)?;
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::SliceCols(a, start), rg))
    }

    /// Column-wise mean, `[r×c] → [1×c]`.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let (r, c) = (av.rows(), av.cols());
        let mut data = vec![0.0; c];
        for row in av.data().chunks(c) {
            for (d, x) in data.iter_mut().zip(row) {
                *d += x;
            }
        }
        data.iter_mut().for_each(|d| *d /= r as f64);
        let rg = self.rg(&[a]);
        self.push(Tensor::row(data), Op::MeanRows(a), rg)
    }

    /// `[1×c] → [n×c]`.
    pub fn broadcast_rows(&mut self, a: Var, n: usize) -> Result<Var> {
        let av = self.value(a);
        if av.rows() != 1 {
            return Err(Error::Shape {
                op: "broadcast_rows",
                lhs: av.shape().to_vec(),
                rhs: vec![1, av.cols()],
            });
        }
        let value = Tensor::matrix(n, av.cols(), av.data().repeat(n))?;
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::BroadcastRows(a), rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).sum());
        let rg = self.rg(&[a]);
        self.push(value, Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).mean());
        let rg = self.rg(&[a]);
        self.push(value, Op::Mean(a), rg)
    }

    /// Softmax cross-entropy of a `[1×n]` logit row against class `label`.
    pub fn cross_entropy(&mut self, logits: Var, label: usize) -> Result<Var> {
        let lv = self.value(logits);
        if lv.rows() != 1 {
            return Err(Error::Shape {
                op: "cross_entropy",
                lhs: lv.shape().to_vec(),
                rhs: vec![1, lv.cols()],
            });
        }
        if label >= lv.cols() {
            return Err(Error::Bounds {
                what: "cross_entropy label",
                index: label,
                len: lv.cols(),
            });
        }
        let value = Tensor::scalar(log_sum_exp(lv.data()) - lv.data()[label]);
        let rg = self.rg(&[logits]);
        Ok(self.push(value, Op::CrossEntropy(logits, label), rg))
    }

    /// Replaces the forward value while passing gradients through unchanged.
    pub fn straight_through(&mut self, a: Var, value: Tensor) -> Result<Var> {
        self.value(a).expect_same_shape(&value, "straight_through")?;
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::StraightThrough(a), rg))
    }

    /// Mean squared error between two same-shaped nodes.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.sub(a, b)?;
        let sq = self.square(d);
        Ok(self.mean(sq))
    }

    pub fn zero_grad(&mut self) {
        self.leaf_grads.clear();
    }

    /// Accumulated gradient of a leaf, if any.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.leaf_grads.get(&v.0).map(Vec::as_slice)
    }

    /// Gradients of every parameter used on this graph, indexed by [`ParamId`].
    pub fn param_grads(&self, store: &ParamStore) -> GradMap {
        let mut map = GradMap::empty(store.len());
        for (&id, v) in &self.params {
            if let Some(g) = self.leaf_grads.get(&v.0) {
                map.set(id, g.clone());
            }
        }
        map
    }

    /// Propagates `d loss / d node` back to every gradient-tracking leaf.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if !self.value(loss).is_scalar() {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                let slot = self
                    .leaf_grads
                    .entry(idx)
                    .or_insert_with(|| vec![0.0; g.len()]);
                slot.iter_mut().zip(&g).for_each(|(s, x)| *s += x);
                continue;
            }
            self.propagate(idx, &g, &mut grads);
        }
        Ok(())
    }

    fn propagate(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let out = &nodes[idx].value;
        let tracked = |v: Var| nodes[v.0].requires_grad;
        // Adds `f(i)` into the gradient slot of `v` for every flat index.
        let mut acc = |v: Var, contrib: &dyn Fn(&mut [f64])| {
            if !tracked(v) {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.len()]);
            contrib(slot);
        };

        match &nodes[idx].op {
            Op::Leaf => {}
            &Op::MatMul(a, b) => {
                let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                acc(a, &|s| matmul_nt_into(g, bv.data(), s, m, n, k));
                acc(b, &|s| matmul_tn_into(av.data(), g, s, m, k, n));
            }
            &Op::Add(a, b) => {
                acc(a, &|s| add_into(s, g));
                acc(b, &|s| add_into(s, g));
            }
            &Op::Sub(a, b) => {
                acc(a, &|s| add_into(s, g));
                acc(b, &|s| s.iter_mut().zip(g).for_each(|(s, x)| *s -= x));
            }
            &Op::Mul(a, b) => {
                let (av, bv) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                acc(a, &|s| {
                    for i in 0..s.len() {
                        s[i] += g[i] * bv[i];
                    }
                });
                acc(b, &|s| {
                    for i in 0..s.len() {
                        s[i] += g[i] * av[i];
                    }
                });
            }
            &Op::AddRow(a, b) => {
                let c = out.cols();
                acc(a, &|s| add_into(s, g));
                acc(b, &|s| {
                    for row in g.chunks(c) {
                        add_into(s, row);
                    }
                });
            }
            &Op::Scale(a, f) => acc(a, &|s| s.iter_mut().zip(g).for_each(|(s, x)| *s += f * x)),
            &Op::Silu(a) => {
                let x = nodes[a.0].value.data();
                acc(a, &|s| {
                    for i in 0..s.len() {
                        let sg = sigmoid(x[i]);
                        s[i] += g[i] * sg * (1.0 + x[i] * (1.0 - sg));
                    }
                });
            }
            &Op::Tanh(a) => {
                let y = out.data();
                acc(a, &|s| {
                    for i in 0..s.len() {
                        s[i] += g[i] * (1.0 - y[i] * y[i]);
                    }
                });
            }
            &Op::Square(a) => {
                let x = nodes[a.0].value.data();
                acc(a, &|s| {
                    for i in 0..s.len() {
                        s[i] += 2.0 * x[i] * g[i];
                    }
                });
            }
            &Op::Abs(a) => {
                let x = nodes[a.0].value.data();
                acc(a, &|s| {
                    for i in 0..s.len() {
                        let sign = if x[i] > 0.0 {
                            1.0
                        } else if x[i] < 0.0 {
                            -1.0
                        } else {
                            0.0
                        };
                        s[i] += sign * g[i];
                    }
                });
            }
            &Op::SoftmaxRows(a) => {
                let c = out.cols();
                let y = out.data();
                acc(a, &|s| {
                    for ((srow, yrow), grow) in s.chunks_mut(c).zip(y.chunks(c)).zip(g.chunks(c)) {
                        let dot: f64 = yrow.iter().zip(grow).map(|(y, g)| y * g).sum();
                        for j in 0..c {
                            srow[j] += yrow[j] * (grow[j] - dot);
                        }
                    }
                });
            }
            &Op::Transpose(a) => {
                let (r, c) = (out.rows(), out.cols());
                // out is [r×c], input is [c×r]
                acc(a, &|s| {
                    for i in 0..r {
                        for j in 0..c {
                            s[j * r + i] += g[i * c + j];
                        }
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let total = out.cols();
                let mut offset = 0;
                for &p in parts {
                    let pc = nodes[p.0].value.cols();
                    acc(p, &|s| {
                        for (srow, grow) in s.chunks_mut(pc).zip(g.chunks(total)) {
                            add_into(srow, &grow[offset..offset + pc]);
                        }
                    });
                    offset += pc;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = nodes[p.0].value.len();
                    acc(p, &|s| add_into(s, &g[offset..offset + n]));
                    offset += n;
                }
            }
            &Op::SliceRows(a, start) => {
                let c = out.cols();
                acc(a, &|s| add_into(&mut s[start * c..start * c + g.len()], g));
            }
            &Op::SliceCols(a, start) => {
                let len = out.cols();
                let c = nodes[a.0].value.cols();
                acc(a, &|s| {
                    for (srow, grow) in s.chunks_mut(c).zip(g.chunks(len)) {
                        add_into(&mut srow[start..start + len], grow);
                    }
                });
            }
            &Op::MeanRows(a) => {
                let r = nodes[a.0].value.rows() as f64;
                acc(a, &|s| {
                    for row in s.chunks_mut(g.len()) {
                        row.iter_mut().zip(g).for_each(|(s, x)| *s += x / r);
                    }
                });
            }
            &Op::BroadcastRows(a) => {
                let c = out.cols();
                acc(a, &|s| {
                    for row in g.chunks(c) {
                        add_into(s, row);
                    }
                });
            }
            &Op::Sum(a) => acc(a, &|s| s.iter_mut().for_each(|s| *s += g[0])),
            &Op::Mean(a) => {
                let n = nodes[a.0].value.len() as f64;
                acc(a, &|s| s.iter_mut().for_each(|s| *s += g[0] / n));
            }
            &Op::CrossEntropy(a, label) => {
                let mut p = nodes[a.0].value.data().to_vec();
                softmax_in_place(&mut p);
                p[label] -= 1.0;
                acc(a, &|s| s.iter_mut().zip(&p).for_each(|(s, x)| *s += g[0] * x));
            }
            &Op::StraightThrough(a) => acc(a, &|s| add_into(s, g)),
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        total += *x;
    }
    row.iter_mut().for_each(|x| *x /= total);
}

pub(crate) fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_gradient() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::scalar(3.0));
        let y = g.square(x);
        g.backward(y).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[6.0]);
    }

    #[test]
    fn straight_through_keeps_value_and_passes_gradient() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::row(vec![1.0, 5.0]));
        let y = g.straight_through(x, Tensor::row(vec![1.0, 2.0])).unwrap();
        assert_eq!(g.value(y).data(), &[1.0, 2.0]);
        let y2 = g.scale(y, 3.0);
        let l = g.sum(y2);
        g.backward(l).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[3.0, 3.0]);
        assert!(g.straight_through(x, Tensor::scalar(1.0)).is_err());
    }

    #[test]
    fn constant_function_has_zero_gradient() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::scalar(3.0));
        let c = g.constant(Tensor::scalar(2.0));
        let zero = g.scale(x, 0.0);
        let y = g.add(zero, c).unwrap();
        g.backward(y).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[0.0]);
    }

    #[test]
    fn softmax_sum_has_vanishing_gradient() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::row(vec![0.3, -1.2, 2.0, 0.7]));
        let s = g.softmax_rows(x);
        let y = g.sum(s);
        g.backward(y).unwrap();
        assert!(g.grad(x).unwrap().iter().all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::row(vec![1.0, 2.0]));
        assert!(matches!(g.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn second_backward_doubles_leaf_grads() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::row(vec![1.0, -2.0]));
        let sq = g.square(x);
        let y = g.sum(sq);
        g.backward(y).unwrap();
        let first = g.grad(x).unwrap().to_vec();
        g.backward(y).unwrap();
        let second = g.grad(x).unwrap();
        assert_eq!(second, &[2.0 * first[0], 2.0 * first[1]]);
        g.zero_grad();
        assert!(g.grad(x).is_none());
    }

    #[test]
    fn reused_leaf_accumulates() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::scalar(2.0));
        let y = g.mul(x, x).unwrap();
        let z = g.add(y, x).unwrap();
        g.backward(z).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[5.0]);
    }

    #[test]
    fn cross_entropy_uniform_logits() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::row(vec![0.0; 6]));
        let l = g.cross_entropy(x, 2).unwrap();
        assert!((g.value(l).item() - 6f64.ln()).abs() < 1e-12);
        g.backward(l).unwrap();
        let grad = g.grad(x).unwrap();
        assert!(grad[2] < 0.0);
        assert!(grad.iter().enumerate().all(|(i, &v)| i == 2 || v > 0.0));
    }
}
