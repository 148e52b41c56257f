//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Tape`] records every operation of one forward pass as a node holding
//! its output value. [`Tape::backward`] walks the nodes in reverse and returns
//! the gradient of a scalar output with respect to every node that requires
//! one. Nodes created from values that do not require gradients are stored as
//! constants, so a detached subgraph costs nothing at backward time.

use rand::Rng;

use super::ops;
use super::tensor::{axis_extents, gemm, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Const,
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddAxis { x: Var, v: Var, axis: usize },
    MulAxis { x: Var, v: Var, axis: usize },
    Scale(Var, f64),
    ScaleBy { x: Var, s: Var },
    MulConst { x: Var, factor: Tensor },
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    Relu(Var),
    Softmax { x: Var, axis: usize },
    MaskedFill { x: Var, fill: Vec<bool> },
    Normalize { x: Var, axis: usize, rstd: Vec<f64> },
    Conv1d { x: Var, kernel: Var, bias: Var, cols: Vec<f64>, ksize: usize },
    IndexRows { x: Var, idx: Vec<usize> },
    ConcatCols(Vec<Var>),
    SliceCols { x: Var, start: usize },
    ConcatRows(Vec<Var>),
    SliceRows { x: Var, start: usize },
    Reshape(Var),
    Sum(Var),
    Mean(Var),
    MeanAbsDiff(Var, Var),
    MeanSqDiff(Var, Var),
    ForwardAttention { w: Var, sums: Vec<f64> },
    Ctc { logits: Var, grad: Tensor },
}

struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn check_same(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(format!("{what}: {:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

fn check_matrix(t: &Tensor, what: &str) -> Result<()> {
    if t.rank() != 2 {
        return Err(Error::shape(format!("{what} expects a matrix, got {:?}", t.shape())));
    }
    Ok(())
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, parents: &[Var]) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        let op = if requires_grad { op } else { Op::Const };
        self.nodes.push(Node { value, requires_grad, op });
        Var(self.nodes.len() - 1)
    }

    /// A trainable input; gradients are reported for it.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node { value, requires_grad: true, op: Op::Leaf });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node { value, requires_grad: false, op: Op::Const });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Copies `v` into a constant: no gradient flows back through the result.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.constant(value)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        check_same(va, vb, "add")?;
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x + y).collect();
        let out = Tensor::from_parts(va.shape().to_vec(), data);
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        check_same(va, vb, "sub")?;
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x - y).collect();
        let out = Tensor::from_parts(va.shape().to_vec(), data);
        Ok(self.push(out, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        check_same(va, vb, "mul")?;
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x * y).collect();
        let out = Tensor::from_parts(va.shape().to_vec(), data);
        Ok(self.push(out, Op::Mul(a, b), &[a, b]))
    }

    fn axis_operand(&self, x: Var, v: Var, axis: usize) -> Result<(usize, usize, usize)> {
        let (vx, vv) = (self.value(x), self.value(v));
        if axis >= vx.rank() {
            return Err(Error::arg(format!("axis {axis} out of range for {:?}", vx.shape())));
        }
        if vv.rank() != 1 || vv.numel() != vx.shape()[axis] {
            return Err(Error::shape(format!(
                "broadcast vector {:?} does not match axis {axis} of {:?}",
                vv.shape(),
                vx.shape()
            )));
        }
        Ok(axis_extents(vx.shape(), axis))
    }

    /// Adds vector `v` along `axis` of `x` (broadcast over every other axis).
    pub fn add_axis(&mut self, x: Var, v: Var, axis: usize) -> Result<Var> {
        let (outer, len, inner) = self.axis_operand(x, v, axis)?;
        let (vx, vv) = (self.value(x), self.value(v));
        let mut data = vx.data().to_vec();
        for o in 0..outer {
            for i in 0..len {
                let base = (o * len + i) * inner;
                let b = vv.data()[i];
                data[base..base + inner].iter_mut().for_each(|d| *d += b);
            }
        }
        let out = Tensor::from_parts(vx.shape().to_vec(), data);
        Ok(self.push(out, Op::AddAxis { x, v, axis }, &[x, v]))
    }

    /// Multiplies `x` by vector `v` broadcast along `axis`.
    pub fn mul_axis(&mut self, x: Var, v: Var, axis: usize) -> Result<Var> {
        let (outer, len, inner) = self.axis_operand(x, v, axis)?;
        let (vx, vv) = (self.value(x), self.value(v));
        let mut data = vx.data().to_vec();
        for o in 0..outer {
            for i in 0..len {
                let base = (o * len + i) * inner;
                let s = vv.data()[i];
                data[base..base + inner].iter_mut().for_each(|d| *d *= s);
            }
        }
        let out = Tensor::from_parts(vx.shape().to_vec(), data);
        Ok(self.push(out, Op::MulAxis { x, v, axis }, &[x, v]))
    }

    /// Adds a bias vector to every row of the last axis.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let axis = self.value(x).rank() - 1;
        self.add_axis(x, bias, axis)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let out = self.value(x).map(|v| v * c);
        self.push(out, Op::Scale(x, c), &[x])
    }

    /// Multiplies `x` by the single value held in `s`.
    pub fn scale_by(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.value(s).numel() != 1 {
            return Err(Error::shape("scale_by expects a one-element scale"));
        }
        let c = self.value(s).item();
        let out = self.value(x).map(|v| v * c);
        Ok(self.push(out, Op::ScaleBy { x, s }, &[x, s]))
    }

    /// Elementwise product with a fixed (non-differentiable) factor.
    pub fn mul_const(&mut self, x: Var, factor: Tensor) -> Result<Var> {
        let vx = self.value(x);
        check_same(vx, &factor, "mul_const")?;
        let data = vx.data().iter().zip(factor.data()).map(|(a, b)| a * b).collect();
        let out = Tensor::from_parts(vx.shape().to_vec(), data);
        Ok(self.push(out, Op::MulConst { x, factor }, &[x]))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        let out = super::tensor::matmul(va, vb)?;
        Ok(self.push(out, Op::MatMul(a, b), &[a, b]))
    }

    /// `a · bᵀ` for `a: [m×k]`, `b: [n×k]`.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        check_matrix(va, "matmul_bt")?;
        check_matrix(vb, "matmul_bt")?;
        if va.cols() != vb.cols() {
            return Err(Error::shape(format!("matmul_bt {:?} x {:?}ᵀ", va.shape(), vb.shape())));
        }
        let (m, k, n) = (va.rows(), va.cols(), vb.rows());
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, va.data(), (k, 1), vb.data(), (1, k), 0.0, &mut out);
        let out = Tensor::from_parts(vec![m, n], out);
        Ok(self.push(out, Op::MatMulBt(a, b), &[a, b]))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.max(0.0));
        self.push(out, Op::Relu(x), &[x])
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let out = ops::softmax(self.value(x), axis)?;
        Ok(self.push(out, Op::Softmax { x, axis }, &[x]))
    }

    /// Row softmax of a matrix restricted to `allowed` entries; the others
    /// come out as exactly zero. Every row needs at least one allowed entry.
    pub fn masked_softmax_rows(&mut self, x: Var, allowed: &[bool]) -> Result<Var> {
        let out = ops::masked_softmax_rows(self.value(x), allowed)?;
        Ok(self.push(out, Op::Softmax { x, axis: 1 }, &[x]))
    }

    /// Replaces entries where `fill` is true with `value`.
    pub fn masked_fill(&mut self, x: Var, fill: &[bool], value: f64) -> Result<Var> {
        let vx = self.value(x);
        if fill.len() != vx.numel() {
            return Err(Error::shape("masked_fill mask length"));
        }
        let data = vx.data().iter().zip(fill).map(|(&v, &f)| if f { value } else { v }).collect();
        let out = Tensor::from_parts(vx.shape().to_vec(), data);
        Ok(self.push(out, Op::MaskedFill { x, fill: fill.to_vec() }, &[x]))
    }

    /// Zero-mean, unit-variance normalization of every slice along `axis`.
    pub fn normalize(&mut self, x: Var, axis: usize, eps: f64) -> Result<Var> {
        let (out, rstd) = ops::normalize(self.value(x), axis, eps)?;
        Ok(self.push(out, Op::Normalize { x, axis, rstd }, &[x]))
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, axis: usize, eps: f64) -> Result<Var> {
        let n = self.normalize(x, axis, eps)?;
        let g = self.mul_axis(n, gain, axis)?;
        self.add_axis(g, bias, axis)
    }

    /// Same-padded 1-D convolution, `x: [T×C_in]`, `kernel: [K×C_in×C_out]`.
    pub fn conv1d(&mut self, x: Var, kernel: Var, bias: Var) -> Result<Var> {
        let (out, cols) = ops::conv1d_with_cols(self.value(x), self.value(kernel), self.value(bias))?;
        let ksize = self.value(kernel).shape()[0];
        Ok(self.push(out, Op::Conv1d { x, kernel, bias, cols, ksize }, &[x, kernel, bias]))
    }

    /// Gathers rows of a matrix; indices may repeat or be skipped.
    pub fn index_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let vx = self.value(x);
        check_matrix(vx, "index_rows")?;
        if idx.is_empty() {
            return Err(Error::arg("index_rows needs at least one index"));
        }
        let c = vx.cols();
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            if i >= vx.rows() {
                return Err(Error::arg(format!("row index {i} out of range {}", vx.rows())));
            }
            data.extend_from_slice(vx.row(i));
        }
        let out = Tensor::from_parts(vec![idx.len(), c], data);
        Ok(self.push(out, Op::IndexRows { x, idx: idx.to_vec() }, &[x]))
    }

    /// Embedding lookup: rows of `table` selected by token ids.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        self.index_rows(table, ids)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::arg("concat of nothing"))?;
        let rows = self.value(*first).rows();
        let mut width = 0;
        for p in parts {
            let v = self.value(*p);
            check_matrix(v, "concat_cols")?;
            if v.rows() != rows {
                return Err(Error::shape("concat_cols row counts differ"));
            }
            width += v.cols();
        }
        let mut data = Vec::with_capacity(rows * width);
        for r in 0..rows {
            for p in parts {
                data.extend_from_slice(self.value(*p).row(r));
            }
        }
        let out = Tensor::from_parts(vec![rows, width], data);
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), parts))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let vx = self.value(x);
        check_matrix(vx, "slice_cols")?;
        if len == 0 || start + len > vx.cols() {
            return Err(Error::arg(format!("column slice {start}+{len} of {:?}", vx.shape())));
        }
        let mut data = Vec::with_capacity(vx.rows() * len);
        for r in 0..vx.rows() {
            data.extend_from_slice(&vx.row(r)[start..start + len]);
        }
        let out = Tensor::from_parts(vec![vx.rows(), len], data);
        Ok(self.push(out, Op::SliceCols { x, start }, &[x]))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::arg("concat of nothing"))?;
        let cols = self.value(*first).cols();
        let mut rows = 0;
        let mut data = Vec::new();
        for p in parts {
            let v = self.value(*p);
            check_matrix(v, "concat_rows")?;
            if v.cols() != cols {
                return Err(Error::shape("concat_rows column counts differ"));
            }
            rows += v.rows();
            data.extend_from_slice(v.data());
        }
        let out = Tensor::from_parts(vec![rows, cols], data);
        Ok(self.push(out, Op::ConcatRows(parts.to_vec()), parts))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let vx = self.value(x);
        check_matrix(vx, "slice_rows")?;
        if len == 0 || start + len > vx.rows() {
            return Err(Error::arg(format!("row slice {start}+{len} of {:?}", vx.shape())));
        }
        let c = vx.cols();
        let data = vx.data()[start * c..(start + len) * c].to_vec();
        let out = Tensor::from_parts(vec![len, c], data);
        Ok(self.push(out, Op::SliceRows { x, start }, &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape.to_vec())?;
        Ok(self.push(out, Op::Reshape(x), &[x]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        self.push(out, Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let out = Tensor::scalar(v.sum() / v.numel() as f64);
        self.push(out, Op::Mean(x), &[x])
    }

    /// Mean absolute difference over all elements.
    pub fn mean_abs_diff(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        check_same(va, vb, "mean_abs_diff")?;
        let s: f64 = va.data().iter().zip(vb.data()).map(|(x, y)| (x - y).abs()).sum();
        let out = Tensor::scalar(s / va.numel() as f64);
        Ok(self.push(out, Op::MeanAbsDiff(a, b), &[a, b]))
    }

    /// Mean squared difference over all elements.
    pub fn mean_sq_diff(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        check_same(va, vb, "mean_sq_diff")?;
        let s: f64 = va.data().iter().zip(vb.data()).map(|(x, y)| (x - y) * (x - y)).sum();
        let out = Tensor::scalar(s / va.numel() as f64);
        Ok(self.push(out, Op::MeanSqDiff(a, b), &[a, b]))
    }

    /// Inverted dropout. In eval mode, or with `p == 0`, returns `x` itself.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, p: f64, train: bool, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::arg(format!("dropout rate {p} outside [0, 1)")));
        }
        if !train || p == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - p);
        let shape = self.value(x).shape().to_vec();
        let numel = self.value(x).numel();
        let factor: Vec<f64> =
            (0..numel).map(|_| if rng.random::<f64>() < p { 0.0 } else { keep }).collect();
        self.mul_const(x, Tensor::from_parts(shape, factor))
    }

    /// Forward-attention recursion over raw attention rows `w: [T×N]`.
    /// See [`crate::alignment::forward_attention`] for the contract.
    pub fn forward_attention(&mut self, w: Var) -> Result<Var> {
        let (alpha, sums) = crate::alignment::forward_attention_values(self.value(w))?;
        Ok(self.push(alpha, Op::ForwardAttention { w, sums }, &[w]))
    }

    /// CTC negative log-likelihood of `target` under unnormalized `logits`.
    pub fn ctc_loss(&mut self, logits: Var, target: &[usize], blank: usize) -> Result<Var> {
        let (nll, grad) = crate::losses::ctc_forward_backward(self.value(logits), target, blank)?;
        Ok(self.push(Tensor::scalar(nll), Op::Ctc { logits, grad }, &[logits]))
    }

    /// Reverse pass from the scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(Error::arg(format!(
                "backward needs a scalar output, got {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), 1.0));
        }
        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if matches!(node.op, Op::Leaf | Op::Const) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, delta: Tensor) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(g) => g.add_assign(&delta),
            slot @ None => *slot = Some(delta),
        }
    }

    /// Mutable gradient buffer for `v`, zero-initialised on first use.
    fn grad_buf<'g>(&self, grads: &'g mut [Option<Tensor>], v: Var) -> Option<&'g mut Tensor> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let shape = self.value(v).shape();
        Some(grads[v.0].get_or_insert_with(|| Tensor::zeros(shape)))
    }

    fn backprop_node(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let zip_map = |a: &Tensor, b: &Tensor, f: &dyn Fn(f64, f64) -> f64| {
            Tensor::from_parts(
                a.shape().to_vec(),
                a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect(),
            )
        };
        match &node.op {
            Op::Const | Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                let da = zip_map(g, self.value(*b), &|x, y| x * y);
                let db = zip_map(g, self.value(*a), &|x, y| x * y);
                self.accumulate(grads, *a, da);
                self.accumulate(grads, *b, db);
            }
            Op::AddAxis { x, v, axis } => {
                self.accumulate(grads, *x, g.clone());
                if let Some(gv) = self.grad_buf(grads, *v) {
                    let (outer, len, inner) = axis_extents(g.shape(), *axis);
                    for o in 0..outer {
                        for i in 0..len {
                            let base = (o * len + i) * inner;
                            gv.data_mut()[i] += g.data()[base..base + inner].iter().sum::<f64>();
                        }
                    }
                }
            }
            Op::MulAxis { x, v, axis } => {
                let (outer, len, inner) = axis_extents(g.shape(), *axis);
                let vv = self.value(*v);
                if self.nodes[x.0].requires_grad {
                    let mut dx = g.clone();
                    for o in 0..outer {
                        for i in 0..len {
                            let base = (o * len + i) * inner;
                            let s = vv.data()[i];
                            dx.data_mut()[base..base + inner].iter_mut().for_each(|d| *d *= s);
                        }
                    }
                    self.accumulate(grads, *x, dx);
                }
                let vx = self.value(*x);
                if let Some(gv) = self.grad_buf(grads, *v) {
                    for o in 0..outer {
                        for i in 0..len {
                            let base = (o * len + i) * inner;
                            let s: f64 = g.data()[base..base + inner]
                                .iter()
                                .zip(&vx.data()[base..base + inner])
                                .map(|(a, b)| a * b)
                                .sum();
                            gv.data_mut()[i] += s;
                        }
                    }
                }
            }
            Op::Scale(x, c) => self.accumulate(grads, *x, g.map(|v| v * c)),
            Op::ScaleBy { x, s } => {
                let c = self.value(*s).item();
                self.accumulate(grads, *x, g.map(|v| v * c));
                let ds: f64 = g.data().iter().zip(self.value(*x).data()).map(|(a, b)| a * b).sum();
                self.accumulate(grads, *s, Tensor::full(self.value(*s).shape(), ds));
            }
            Op::MulConst { x, factor } => self.accumulate(grads, *x, zip_map(g, factor, &|a, b| a * b)),
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (va.rows(), va.cols(), vb.cols());
                if let Some(ga) = self.grad_buf(grads, *a) {
                    gemm(m, n, k, g.data(), (n, 1), vb.data(), (1, n), 1.0, ga.data_mut());
                }
                if let Some(gb) = self.grad_buf(grads, *b) {
                    gemm(k, m, n, va.data(), (1, k), g.data(), (n, 1), 1.0, gb.data_mut());
                }
            }
            Op::MatMulBt(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (va.rows(), va.cols(), vb.rows());
                if let Some(ga) = self.grad_buf(grads, *a) {
                    gemm(m, n, k, g.data(), (n, 1), vb.data(), (k, 1), 1.0, ga.data_mut());
                }
                if let Some(gb) = self.grad_buf(grads, *b) {
                    gemm(n, m, k, g.data(), (1, n), va.data(), (k, 1), 1.0, gb.data_mut());
                }
            }
            Op::Relu(x) => {
                self.accumulate(grads, *x, zip_map(g, &node.value, &|a, y| if y > 0.0 { a } else { 0.0 }))
            }
            Op::Softmax { x, axis } => {
                let y = &node.value;
                let (outer, len, inner) = axis_extents(y.shape(), *axis);
                let mut dx = vec![0.0; y.numel()];
                for o in 0..outer {
                    for j in 0..inner {
                        let idx = |i: usize| (o * len + i) * inner + j;
                        let dot: f64 = (0..len).map(|i| g.data()[idx(i)] * y.data()[idx(i)]).sum();
                        for i in 0..len {
                            dx[idx(i)] = y.data()[idx(i)] * (g.data()[idx(i)] - dot);
                        }
                    }
                }
                self.accumulate(grads, *x, Tensor::from_parts(y.shape().to_vec(), dx));
            }
            Op::MaskedFill { x, fill } => {
                let dx = g.data().iter().zip(fill).map(|(&d, &f)| if f { 0.0 } else { d }).collect();
                self.accumulate(grads, *x, Tensor::from_parts(g.shape().to_vec(), dx));
            }
            Op::Normalize { x, axis, rstd } => {
                let y = &node.value;
                let (outer, len, inner) = axis_extents(y.shape(), *axis);
                let mut dx = vec![0.0; y.numel()];
                for o in 0..outer {
                    for j in 0..inner {
                        let idx = |i: usize| (o * len + i) * inner + j;
                        let r = rstd[o * inner + j];
                        let mg = (0..len).map(|i| g.data()[idx(i)]).sum::<f64>() / len as f64;
                        let mgy =
                            (0..len).map(|i| g.data()[idx(i)] * y.data()[idx(i)]).sum::<f64>() / len as f64;
                        for i in 0..len {
                            dx[idx(i)] = r * (g.data()[idx(i)] - mg - y.data()[idx(i)] * mgy);
                        }
                    }
                }
                self.accumulate(grads, *x, Tensor::from_parts(y.shape().to_vec(), dx));
            }
            Op::Conv1d { x, kernel, bias, cols, ksize } => {
                let vk = self.value(*kernel);
                let (t, cout) = (g.rows(), g.cols());
                let cin = vk.shape()[1];
                let kc = ksize * cin;
                if let Some(gk) = self.grad_buf(grads, *kernel) {
                    gemm(kc, t, cout, cols, (1, kc), g.data(), (cout, 1), 1.0, gk.data_mut());
                }
                if let Some(gb) = self.grad_buf(grads, *bias) {
                    for r in 0..t {
                        for (d, v) in gb.data_mut().iter_mut().zip(g.row(r)) {
                            *d += v;
                        }
                    }
                }
                if self.nodes[x.0].requires_grad {
                    let mut gcols = vec![0.0; t * kc];
                    gemm(t, cout, kc, g.data(), (cout, 1), vk.data(), (1, cout), 0.0, &mut gcols);
                    let half = ksize / 2;
                    let mut dx = vec![0.0; t * cin];
                    for r in 0..t {
                        for k in 0..*ksize {
                            let src = r + k;
                            if src < half || src - half >= t {
                                continue;
                            }
                            let src = src - half;
                            let from = &gcols[r * kc + k * cin..r * kc + (k + 1) * cin];
                            for (d, v) in dx[src * cin..(src + 1) * cin].iter_mut().zip(from) {
                                *d += v;
                            }
                        }
                    }
                    self.accumulate(grads, *x, Tensor::from_parts(vec![t, cin], dx));
                }
            }
            Op::IndexRows { x, idx } => {
                if let Some(gx) = self.grad_buf(grads, *x) {
                    let c = g.cols();
                    for (r, &i) in idx.iter().enumerate() {
                        for (d, v) in gx.data_mut()[i * c..(i + 1) * c].iter_mut().zip(g.row(r)) {
                            *d += v;
                        }
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for p in parts {
                    let w = self.value(*p).cols();
                    if self.nodes[p.0].requires_grad {
                        let mut d = Vec::with_capacity(g.rows() * w);
                        for r in 0..g.rows() {
                            d.extend_from_slice(&g.row(r)[offset..offset + w]);
                        }
                        self.accumulate(grads, *p, Tensor::from_parts(vec![g.rows(), w], d));
                    }
                    offset += w;
                }
            }
            Op::SliceCols { x, start } => {
                if let Some(gx) = self.grad_buf(grads, *x) {
                    let w = g.cols();
                    for r in 0..g.rows() {
                        for (d, v) in gx.row_mut(r)[*start..start + w].iter_mut().zip(g.row(r)) {
                            *d += v;
                        }
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let c = g.cols();
                let mut offset = 0;
                for p in parts {
                    let rows = self.value(*p).rows();
                    if self.nodes[p.0].requires_grad {
                        let d = g.data()[offset * c..(offset + rows) * c].to_vec();
                        self.accumulate(grads, *p, Tensor::from_parts(vec![rows, c], d));
                    }
                    offset += rows;
                }
            }
            Op::SliceRows { x, start } => {
                if let Some(gx) = self.grad_buf(grads, *x) {
                    let c = g.cols();
                    for (d, v) in gx.data_mut()[start * c..].iter_mut().zip(g.data()) {
                        *d += v;
                    }
                }
            }
            Op::Reshape(x) => {
                let shape = self.value(*x).shape().to_vec();
                self.accumulate(grads, *x, Tensor::from_parts(shape, g.data().to_vec()));
            }
            Op::Sum(x) => {
                let s = g.item();
                self.accumulate(grads, *x, Tensor::full(self.value(*x).shape(), s));
            }
            Op::Mean(x) => {
                let v = self.value(*x);
                let s = g.item() / v.numel() as f64;
                self.accumulate(grads, *x, Tensor::full(v.shape(), s));
            }
            Op::MeanAbsDiff(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let s = g.item() / va.numel() as f64;
                let d = zip_map(va, vb, &|x, y| {
                    if x > y {
                        s
                    } else if x < y {
                        -s
                    } else {
                        0.0
                    }
                });
                self.accumulate(grads, *b, d.map(|v| -v));
                self.accumulate(grads, *a, d);
            }
            Op::MeanSqDiff(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let s = 2.0 * g.item() / va.numel() as f64;
                let d = zip_map(va, vb, &|x, y| s * (x - y));
                self.accumulate(grads, *b, d.map(|v| -v));
                self.accumulate(grads, *a, d);
            }
            Op::ForwardAttention { w, sums } => {
                let dw = crate::alignment::forward_attention_backward(self.value(*w), &node.value, sums, g);
                self.accumulate(grads, *w, dw);
            }
            Op::Ctc { logits, grad } => {
                let s = g.item();
                self.accumulate(grads, *logits, grad.map(|v| v * s));
            }
        }
    }
}
