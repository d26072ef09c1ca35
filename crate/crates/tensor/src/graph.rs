//! Dynamic computation graph with reverse-mode differentiation.
//!
//! A [`Graph`] is an append-only tape. Every operation evaluates eagerly,
//! stores its value, and records the inputs it was computed from. Calling
//! [`Graph::backward`] walks the tape in reverse and returns the gradient of a
//! scalar output with respect to every node that depends on a
//! gradient-requiring leaf.
//!
//! The graph is rebuilt for each forward pass, so variable-length inputs
//! need no special handling.

use crate::error::{Result, TensorError};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{split_axis, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Shift(Var),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Exp(Var),
    Log(Var),
    Softmax { x: Var, axis: usize },
    LogSoftmax { x: Var, axis: usize },
    Sum(Var),
    SumAxis { x: Var, axis: usize },
    MeanAxis { x: Var, axis: usize },
    MatMul(Var, Var),
    Transpose(Var),
    Concat { parts: Vec<Var>, axis: usize },
    Slice { x: Var, axis: usize, start: usize },
    Pad { x: Var, axis: usize, before: usize },
    Reshape(Var),
    GatherRows { table: Var, idx: Vec<usize> },
    Pick { x: Var, idx: Vec<usize> },
    AddRowBias(Var, Var),
    DepthwiseConv { x: Var, kernel: Var },
    Bilinear { left: Var, right: Var, weight: Var },
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        use Op::*;
        match self {
            Leaf => Vec::new(),
            Add(a, b) | Sub(a, b) | Mul(a, b) | MatMul(a, b) | AddRowBias(a, b) => vec![*a, *b],
            Scale(x, _) | Shift(x) | Sigmoid(x) | Tanh(x) | Relu(x) | Exp(x) | Log(x) | Sum(x)
            | Transpose(x) | Reshape(x) => vec![*x],
            Softmax { x, .. }
            | LogSoftmax { x, .. }
            | SumAxis { x, .. }
            | MeanAxis { x, .. }
            | Slice { x, .. }
            | Pad { x, .. }
            | Pick { x, .. } => vec![*x],
            Concat { parts, .. } => parts.clone(),
            GatherRows { table, .. } => vec![*table],
            DepthwiseConv { x, kernel } => vec![*x, *kernel],
            Bilinear { left, right, weight } => vec![*left, *right, *weight],
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Append-only computation tape.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: Vec<(ParamId, Var)>,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient with respect to `v`, or `None` when `v` does not influence
    /// the output through any gradient-requiring path.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

fn mismatch(op: &'static str, a: &Tensor, b: &Tensor) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

fn expect_rank(op: &'static str, t: &Tensor, rank: usize) -> Result<()> {
    if t.rank() != rank {
        return Err(TensorError::Rank {
            op,
            expected: rank,
            shape: t.shape().to_vec(),
        });
    }
    Ok(())
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn accum<'a>(grads: &'a mut [Option<Vec<f64>>], sizes: &[usize], v: Var) -> &'a mut Vec<f64> {
    grads[v.0].get_or_insert_with(|| vec![0.0; sizes[v.0]])
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

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn item(&self, v: Var) -> Result<f64> {
        self.nodes[v.0].value.item()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        let needs_grad = op.inputs().iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn leaf_node(&mut self, mut value: Tensor, needs_grad: bool) -> Var {
        value.set_requires_grad(false);
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf_node(value, false)
    }

    /// A leaf whose gradient is tracked when `value.requires_grad()` is set.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        let needs = value.requires_grad();
        self.leaf_node(value, needs)
    }

    /// Binds a stored parameter as a leaf. Its gradient can later be written
    /// back with [`Graph::accumulate_param_grads`].
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let t = store.get(id);
        let needs = t.requires_grad();
        let v = self.leaf_node(t.clone(), needs);
        self.params.push((id, v));
        v
    }

    /// Adds `scale` times the gradient of every bound parameter into the store.
    pub fn accumulate_param_grads(&self, grads: &Gradients, store: &mut ParamStore, scale: f64) -> Result<()> {
        for &(id, v) in &self.params {
            if let Some(g) = grads.get(v) {
                store.get_mut(id).accumulate_grad(g, scale)?;
            }
        }
        Ok(())
    }

    fn binary_same(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(mismatch(op, ta, tb));
        }
        Ok(())
    }

    fn zip_map(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| f(*x, *y)).collect();
        Tensor::new(ta.shape(), data).expect("shape preserved")
    }

    fn map(&self, x: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let t = self.value(x);
        Tensor::new(t.shape(), t.data().iter().map(|v| f(*v)).collect()).expect("shape preserved")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same("add", a, b)?;
        let v = self.zip_map(a, b, |x, y| x + y);
        Ok(self.push(v, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same("sub", a, b)?;
        let v = self.zip_map(a, b, |x, y| x - y);
        Ok(self.push(v, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same("mul", a, b)?;
        let v = self.zip_map(a, b, |x, y| x * y);
        Ok(self.push(v, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let v = self.map(x, |t| t * c);
        self.push(v, Op::Scale(x, c))
    }

    /// Adds a constant to every element.
    pub fn shift(&mut self, x: Var, c: f64) -> Var {
        let v = self.map(x, |t| t + c);
        self.push(v, Op::Shift(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let v = self.map(x, sigmoid);
        self.push(v, Op::Sigmoid(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let v = self.map(x, f64::tanh);
        self.push(v, Op::Tanh(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.map(x, |t| if t > 0.0 || t.is_nan() { t } else { 0.0 });
        self.push(v, Op::Relu(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let v = self.map(x, f64::exp);
        self.push(v, Op::Exp(x))
    }

    pub fn log(&mut self, x: Var) -> Var {
        let v = self.map(x, f64::ln);
        self.push(v, Op::Log(x))
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let v = softmax_forward(self.value(x), axis, false)?;
        Ok(self.push(v, Op::Softmax { x, axis }))
    }

    pub fn log_softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let v = softmax_forward(self.value(x), axis, true)?;
        Ok(self.push(v, Op::LogSoftmax { x, axis }))
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x))
    }

    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let v = reduce_axis(self.value(x), axis, 1.0, "sum_axis")?;
        Ok(self.push(v, Op::SumAxis { x, axis }))
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let t = self.value(x);
        let (_, len, _) = split_axis(t.shape(), axis, "mean_axis")?;
        let v = reduce_axis(t, axis, 1.0 / len as f64, "mean_axis")?;
        Ok(self.push(v, Op::MeanAxis { x, axis }))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        expect_rank("matmul", ta, 2)?;
        expect_rank("matmul", tb, 2)?;
        let (m, k) = (ta.shape()[0], ta.shape()[1]);
        let (k2, n) = (tb.shape()[0], tb.shape()[1]);
        if k != k2 {
            return Err(mismatch("matmul", ta, tb));
        }
        let mut out = vec![0.0; m * n];
        matmul_acc(ta.data(), tb.data(), &mut out, m, k, n);
        let v = Tensor::new(&[m, n], out)?;
        Ok(self.push(v, Op::MatMul(a, b)))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        expect_rank("transpose", t, 2)?;
        let (r, c) = (t.shape()[0], t.shape()[1]);
        let d = t.data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = d[i * c + j];
            }
        }
        let v = Tensor::new(&[c, r], out)?;
        Ok(self.push(v, Op::Transpose(x)))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts.first().ok_or(TensorError::EmptyAxis { op: "concat" })?;
        let base = self.value(*first).shape().to_vec();
        split_axis(&base, axis, "concat")?;
        let mut total = 0;
        for p in parts {
            let s = self.value(*p).shape();
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(mismatch("concat", self.value(*first), self.value(*p)));
            }
            total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for p in parts {
                let t = self.value(*p);
                let len = t.shape()[axis];
                let chunk = len * inner;
                out.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let v = Tensor::new(&shape, out)?;
        Ok(self.push(
            v,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
        ))
    }

    /// Elements `start..end` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let t = self.value(x);
        let (outer, len, inner) = split_axis(t.shape(), axis, "slice")?;
        if start >= end || end > len {
            return Err(TensorError::Index {
                op: "slice",
                index: end,
                bound: len,
            });
        }
        let width = end - start;
        let mut out = Vec::with_capacity(outer * width * inner);
        for o in 0..outer {
            let base = o * len * inner;
            out.extend_from_slice(&t.data()[base + start * inner..base + end * inner]);
        }
        let mut shape = t.shape().to_vec();
        shape[axis] = width;
        let v = Tensor::new(&shape, out)?;
        Ok(self.push(v, Op::Slice { x, axis, start }))
    }

    /// Zero-pads `before` and `after` entries along `axis`.
    pub fn pad(&mut self, x: Var, axis: usize, before: usize, after: usize) -> Result<Var> {
        let t = self.value(x);
        let (outer, len, inner) = split_axis(t.shape(), axis, "pad")?;
        let new_len = before + len + after;
        let mut out = vec![0.0; outer * new_len * inner];
        for o in 0..outer {
            let src = &t.data()[o * len * inner..(o + 1) * len * inner];
            let dst = o * new_len * inner + before * inner;
            out[dst..dst + len * inner].copy_from_slice(src);
        }
        let mut shape = t.shape().to_vec();
        shape[axis] = new_len;
        let v = Tensor::new(&shape, out)?;
        Ok(self.push(v, Op::Pad { x, axis, before }))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(x).reshaped(shape)?;
        Ok(self.push(v, Op::Reshape(x)))
    }

    /// Rows `idx` of a rank-2 table, stacked into an `idx.len() x cols` matrix.
    pub fn gather_rows(&mut self, table: Var, idx: &[usize]) -> Result<Var> {
        let t = self.value(table);
        expect_rank("gather_rows", t, 2)?;
        if idx.is_empty() {
            return Err(TensorError::EmptyAxis { op: "gather_rows" });
        }
        let (rows, cols) = (t.shape()[0], t.shape()[1]);
        let mut out = Vec::with_capacity(idx.len() * cols);
        for &r in idx {
            if r >= rows {
                return Err(TensorError::Index {
                    op: "gather_rows",
                    index: r,
                    bound: rows,
                });
            }
            out.extend_from_slice(&t.data()[r * cols..(r + 1) * cols]);
        }
        let v = Tensor::new(&[idx.len(), cols], out)?;
        Ok(self.push(
            v,
            Op::GatherRows {
                table,
                idx: idx.to_vec(),
            },
        ))
    }

    /// `out[r] = x[r, idx[r]]` for a rank-2 `x`.
    pub fn pick(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let t = self.value(x);
        expect_rank("pick", t, 2)?;
        let (rows, cols) = (t.shape()[0], t.shape()[1]);
        if idx.len() != rows {
            return Err(TensorError::ShapeMismatch {
                op: "pick",
                lhs: t.shape().to_vec(),
                rhs: vec![idx.len()],
            });
        }
        let mut out = Vec::with_capacity(rows);
        for (r, &c) in idx.iter().enumerate() {
            if c >= cols {
                return Err(TensorError::Index {
                    op: "pick",
                    index: c,
                    bound: cols,
                });
            }
            out.push(t.data()[r * cols + c]);
        }
        let v = Tensor::new(&[rows], out)?;
        Ok(self.push(
            v,
            Op::Pick {
                x,
                idx: idx.to_vec(),
            },
        ))
    }

    /// Adds a length-`d` vector to every row of an `n x d` matrix.
    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (t, b) = (self.value(x), self.value(bias));
        expect_rank("add_row_bias", t, 2)?;
        let cols = t.shape()[1];
        if b.shape() != [cols] {
            return Err(mismatch("add_row_bias", t, b));
        }
        let data = t
            .data()
            .chunks(cols)
            .flat_map(|row| row.iter().zip(b.data()).map(|(x, y)| x + y))
            .collect();
        let v = Tensor::new(t.shape(), data)?;
        Ok(self.push(v, Op::AddRowBias(x, bias)))
    }

    /// Per-channel convolution along the rows of `x` (`n x d`) with a
    /// `d x k` kernel, zero padded so the output is `n x d`:
    ///
    /// `out[i, c] = sum_j kernel[c, j] * x[i + j - (k - 1) / 2, c]`
    pub fn depthwise_conv(&mut self, x: Var, kernel: Var) -> Result<Var> {
        let (t, w) = (self.value(x), self.value(kernel));
        expect_rank("depthwise_conv", t, 2)?;
        expect_rank("depthwise_conv", w, 2)?;
        let (n, d) = (t.shape()[0], t.shape()[1]);
        let k = w.shape()[1];
        if w.shape()[0] != d {
            return Err(mismatch("depthwise_conv", t, w));
        }
        if k % 2 == 0 {
            return Err(TensorError::EvenKernel(k));
        }
        let half = (k - 1) / 2;
        let (xd, wd) = (t.data(), w.data());
        let mut out = vec![0.0; n * d];
        for i in 0..n {
            for j in 0..k {
                let Some(src) = (i + j).checked_sub(half).filter(|&s| s < n) else {
                    continue;
                };
                for c in 0..d {
                    out[i * d + c] += wd[c * k + j] * xd[src * d + c];
                }
            }
        }
        let v = Tensor::new(&[n, d], out)?;
        Ok(self.push(v, Op::DepthwiseConv { x, kernel }))
    }

    /// Row-wise bilinear forms: `out[n, r] = left[n]^T weight[r] right[n]`
    /// for `left: N x D1`, `right: N x D2`, `weight: q x D1 x D2`.
    pub fn bilinear(&mut self, left: Var, right: Var, weight: Var) -> Result<Var> {
        let (l, r, w) = (self.value(left), self.value(right), self.value(weight));
        expect_rank("bilinear", l, 2)?;
        expect_rank("bilinear", r, 2)?;
        expect_rank("bilinear", w, 3)?;
        let (rows, d1, d2, q) = (l.shape()[0], l.shape()[1], r.shape()[1], w.shape()[0]);
        if r.shape()[0] != rows {
            return Err(mismatch("bilinear", l, r));
        }
        if w.shape()[1] != d1 || w.shape()[2] != d2 {
            return Err(mismatch("bilinear", l, w));
        }
        let (ld, rd, wd) = (l.data(), r.data(), w.data());
        let mut out = vec![0.0; rows * q];
        for n in 0..rows {
            let lrow = &ld[n * d1..(n + 1) * d1];
            let rrow = &rd[n * d2..(n + 1) * d2];
            for f in 0..q {
                let mut acc = 0.0;
                for a in 0..d1 {
                    let wrow = &wd[(f * d1 + a) * d2..(f * d1 + a + 1) * d2];
                    let inner: f64 = wrow.iter().zip(rrow).map(|(x, y)| x * y).sum();
                    acc += lrow[a] * inner;
                }
                out[n * q + f] = acc;
            }
        }
        let v = Tensor::new(&[rows, q], out)?;
        Ok(self.push(v, Op::Bilinear { left, right, weight }))
    }

    /// Reverse pass from a one-element `output`.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        let out = self.value(output);
        if out.numel() != 1 {
            return Err(TensorError::NotScalar(out.shape().to_vec()));
        }
        let sizes: Vec<usize> = self.nodes.iter().map(|n| n.value.numel()).collect();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[output.0] = Some(vec![1.0]);

        for i in (0..=output.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(node, &g, &mut grads, &sizes);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn backprop_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>], sizes: &[usize]) {
        let y = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if self.wants(v) {
                        add_into(accum(grads, sizes, v), g, 1.0);
                    }
                }
            }
            Op::Sub(a, b) => {
                if self.wants(*a) {
                    add_into(accum(grads, sizes, *a), g, 1.0);
                }
                if self.wants(*b) {
                    add_into(accum(grads, sizes, *b), g, -1.0);
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if self.wants(*a) {
                    let ga = accum(grads, sizes, *a);
                    for ((o, gi), bi) in ga.iter_mut().zip(g).zip(bv) {
                        *o += gi * bi;
                    }
                }
                if self.wants(*b) {
                    let gb = accum(grads, sizes, *b);
                    for ((o, gi), ai) in gb.iter_mut().zip(g).zip(av) {
                        *o += gi * ai;
                    }
                }
            }
            Op::Scale(x, c) => {
                if self.wants(*x) {
                    add_into(accum(grads, sizes, *x), g, *c);
                }
            }
            Op::Shift(x) | Op::Reshape(x) => {
                if self.wants(*x) {
                    add_into(accum(grads, sizes, *x), g, 1.0);
                }
            }
            Op::Sigmoid(x) => {
                if self.wants(*x) {
                    let gx = accum(grads, sizes, *x);
                    for ((o, gi), yi) in gx.iter_mut().zip(g).zip(y) {
                        *o += gi * yi * (1.0 - yi);
                    }
                }
            }
            Op::Tanh(x) => {
                if self.wants(*x) {
                    let gx = accum(grads, sizes, *x);
                    for ((o, gi), yi) in gx.iter_mut().zip(g).zip(y) {
                        *o += gi * (1.0 - yi * yi);
                    }
                }
            }
            Op::Relu(x) => {
                if self.wants(*x) {
                    let xv = self.value(*x).data();
                    let gx = accum(grads, sizes, *x);
                    for ((o, gi), xi) in gx.iter_mut().zip(g).zip(xv) {
                        if *xi > 0.0 {
                            *o += gi;
                        }
                    }
                }
            }
            Op::Exp(x) => {
                if self.wants(*x) {
                    let gx = accum(grads, sizes, *x);
                    for ((o, gi), yi) in gx.iter_mut().zip(g).zip(y) {
                        *o += gi * yi;
                    }
                }
            }
            Op::Log(x) => {
                if self.wants(*x) {
                    let xv = self.value(*x).data();
                    let gx = accum(grads, sizes, *x);
                    for ((o, gi), xi) in gx.iter_mut().zip(g).zip(xv) {
                        *o += gi / xi;
                    }
                }
            }
            Op::Softmax { x, axis } => {
                if self.wants(*x) {
                    let (outer, len, inner) = split_axis(node.value.shape(), *axis, "softmax").expect("checked");
                    let gx = accum(grads, sizes, *x);
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |j: usize| (o * len + j) * inner + i;
                            let dot: f64 = (0..len).map(|j| g[at(j)] * y[at(j)]).sum();
                            for j in 0..len {
                                gx[at(j)] += y[at(j)] * (g[at(j)] - dot);
                            }
                        }
                    }
                }
            }
            Op::LogSoftmax { x, axis } => {
                if self.wants(*x) {
                    let (outer, len, inner) = split_axis(node.value.shape(), *axis, "log_softmax").expect("checked");
                    let gx = accum(grads, sizes, *x);
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |j: usize| (o * len + j) * inner + i;
                            let total: f64 = (0..len).map(|j| g[at(j)]).sum();
                            for j in 0..len {
                                gx[at(j)] += g[at(j)] - y[at(j)].exp() * total;
                            }
                        }
                    }
                }
            }
            Op::Sum(x) => {
                if self.wants(*x) {
                    for o in accum(grads, sizes, *x).iter_mut() {
                        *o += g[0];
                    }
                }
            }
            Op::SumAxis { x, axis } | Op::MeanAxis { x, axis } => {
                if self.wants(*x) {
                    let shape = self.value(*x).shape();
                    let (outer, len, inner) = split_axis(shape, *axis, "reduce").expect("checked");
                    let c = if matches!(node.op, Op::MeanAxis { .. }) {
                        1.0 / len as f64
                    } else {
                        1.0
                    };
                    let gx = accum(grads, sizes, *x);
                    for o in 0..outer {
                        for j in 0..len {
                            for i in 0..inner {
                                gx[(o * len + j) * inner + i] += c * g[o * inner + i];
                            }
                        }
                    }
                }
            }
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                if self.wants(*a) {
                    // dA = G * B^T
                    let ga = accum(grads, sizes, *a);
                    let bd = tb.data();
                    for i in 0..m {
                        for p in 0..k {
                            let brow = &bd[p * n..(p + 1) * n];
                            let grow = &g[i * n..(i + 1) * n];
                            ga[i * k + p] += grow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
                        }
                    }
                }
                if self.wants(*b) {
                    // dB = A^T * G
                    let gb = accum(grads, sizes, *b);
                    let ad = ta.data();
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let a_ip = ad[i * k + p];
                            if a_ip == 0.0 {
                                continue;
                            }
                            for (o, gv) in gb[p * n..(p + 1) * n].iter_mut().zip(grow) {
                                *o += a_ip * gv;
                            }
                        }
                    }
                }
            }
            Op::Transpose(x) => {
                if self.wants(*x) {
                    let (r, c) = (self.value(*x).shape()[0], self.value(*x).shape()[1]);
                    let gx = accum(grads, sizes, *x);
                    for i in 0..r {
                        for j in 0..c {
                            gx[i * c + j] += g[j * r + i];
                        }
                    }
                }
            }
            Op::Concat { parts, axis } => {
                let (outer, total, inner) = split_axis(node.value.shape(), *axis, "concat").expect("checked");
                let mut offset = 0;
                for p in parts {
                    let len = self.value(*p).shape()[*axis];
                    if self.wants(*p) {
                        let gp = accum(grads, sizes, *p);
                        for o in 0..outer {
                            let src = (o * total + offset) * inner;
                            add_into(&mut gp[o * len * inner..(o + 1) * len * inner], &g[src..src + len * inner], 1.0);
                        }
                    }
                    offset += len;
                }
            }
            Op::Slice { x, axis, start } => {
                if self.wants(*x) {
                    let (outer, len, inner) = split_axis(self.value(*x).shape(), *axis, "slice").expect("checked");
                    let width = node.value.shape()[*axis];
                    let gx = accum(grads, sizes, *x);
                    for o in 0..outer {
                        let dst = (o * len + start) * inner;
                        add_into(&mut gx[dst..dst + width * inner], &g[o * width * inner..(o + 1) * width * inner], 1.0);
                    }
                }
            }
            Op::Pad { x, axis, before } => {
                if self.wants(*x) {
                    let (outer, len, inner) = split_axis(self.value(*x).shape(), *axis, "pad").expect("checked");
                    let new_len = node.value.shape()[*axis];
                    let gx = accum(grads, sizes, *x);
                    for o in 0..outer {
                        let src = (o * new_len + before) * inner;
                        add_into(&mut gx[o * len * inner..(o + 1) * len * inner], &g[src..src + len * inner], 1.0);
                    }
                }
            }
            Op::GatherRows { table, idx } => {
                if self.wants(*table) {
                    let cols = self.value(*table).shape()[1];
                    let gt = accum(grads, sizes, *table);
                    for (r, &row) in idx.iter().enumerate() {
                        add_into(&mut gt[row * cols..(row + 1) * cols], &g[r * cols..(r + 1) * cols], 1.0);
                    }
                }
            }
            Op::Pick { x, idx } => {
                if self.wants(*x) {
                    let cols = self.value(*x).shape()[1];
                    let gx = accum(grads, sizes, *x);
                    for (r, &c) in idx.iter().enumerate() {
                        gx[r * cols + c] += g[r];
                    }
                }
            }
            Op::AddRowBias(x, bias) => {
                if self.wants(*x) {
                    add_into(accum(grads, sizes, *x), g, 1.0);
                }
                if self.wants(*bias) {
                    let cols = sizes[bias.0];
                    let gb = accum(grads, sizes, *bias);
                    for row in g.chunks(cols) {
                        add_into(gb, row, 1.0);
                    }
                }
            }
            Op::DepthwiseConv { x, kernel } => {
                let (t, w) = (self.value(*x), self.value(*kernel));
                let (n, d, k) = (t.shape()[0], t.shape()[1], w.shape()[1]);
                let half = (k - 1) / 2;
                let taps = |i: usize, j: usize| (i + j).checked_sub(half).filter(|&s| s < n);
                if self.wants(*x) {
                    let wd = w.data();
                    let gx = accum(grads, sizes, *x);
                    for i in 0..n {
                        for j in 0..k {
                            let Some(src) = taps(i, j) else { continue };
                            for c in 0..d {
                                gx[src * d + c] += wd[c * k + j] * g[i * d + c];
                            }
                        }
                    }
                }
                if self.wants(*kernel) {
                    let xd = t.data();
                    let gw = accum(grads, sizes, *kernel);
                    for i in 0..n {
                        for j in 0..k {
                            let Some(src) = taps(i, j) else { continue };
                            for c in 0..d {
                                gw[c * k + j] += xd[src * d + c] * g[i * d + c];
                            }
                        }
                    }
                }
            }
            Op::Bilinear { left, right, weight } => {
                let (l, r, w) = (self.value(*left), self.value(*right), self.value(*weight));
                let (rows, d1, d2, q) = (l.shape()[0], l.shape()[1], r.shape()[1], w.shape()[0]);
                let (ld, rd, wd) = (l.data(), r.data(), w.data());
                let (want_l, want_r, want_w) = (self.wants(*left), self.wants(*right), self.wants(*weight));
                let mut gl = vec![0.0; if want_l { rows * d1 } else { 0 }];
                let mut gr = vec![0.0; if want_r { rows * d2 } else { 0 }];
                let mut gw = vec![0.0; if want_w { q * d1 * d2 } else { 0 }];
                for n in 0..rows {
                    let lrow = &ld[n * d1..(n + 1) * d1];
                    let rrow = &rd[n * d2..(n + 1) * d2];
                    for f in 0..q {
                        let gf = g[n * q + f];
                        if gf == 0.0 {
                            continue;
                        }
                        for a in 0..d1 {
                            let base = (f * d1 + a) * d2;
                            let wrow = &wd[base..base + d2];
                            if want_l {
                                let inner: f64 = wrow.iter().zip(rrow).map(|(x, y)| x * y).sum();
                                gl[n * d1 + a] += gf * inner;
                            }
                            let la = gf * lrow[a];
                            if want_r {
                                for (o, wv) in gr[n * d2..(n + 1) * d2].iter_mut().zip(wrow) {
                                    *o += la * wv;
                                }
                            }
                            if want_w {
                                for (o, rv) in gw[base..base + d2].iter_mut().zip(rrow) {
                                    *o += la * rv;
                                }
                            }
                        }
                    }
                }
                if want_l {
                    add_into(accum(grads, sizes, *left), &gl, 1.0);
                }
                if want_r {
                    add_into(accum(grads, sizes, *right), &gr, 1.0);
                }
                if want_w {
                    add_into(accum(grads, sizes, *weight), &gw, 1.0);
                }
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64], c: f64) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += c * s;
    }
}

fn matmul_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let a_ip = a[i * k + p];
            if a_ip == 0.0 {
                continue;
            }
            for (o, bv) in orow.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *o += a_ip * bv;
            }
        }
    }
}

fn softmax_forward(t: &Tensor, axis: usize, log: bool) -> Result<Tensor> {
    let op = if log { "log_softmax" } else { "softmax" };
    let (outer, len, inner) = split_axis(t.shape(), axis, op)?;
    if len == 0 {
        return Err(TensorError::EmptyAxis { op });
    }
    let x = t.data();
    let mut out = vec![0.0; x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| (o * len + j) * inner + i;
            let max = (0..len).map(|j| x[at(j)]).fold(f64::NEG_INFINITY, f64::max);
            let total: f64 = (0..len).map(|j| (x[at(j)] - max).exp()).sum();
            if log {
                let lse = max + total.ln();
                for j in 0..len {
                    out[at(j)] = x[at(j)] - lse;
                }
            } else {
                for j in 0..len {
                    out[at(j)] = (x[at(j)] - max).exp() / total;
                }
            }
        }
    }
    Tensor::new(t.shape(), out)
}

fn reduce_axis(t: &Tensor, axis: usize, c: f64, op: &'static str) -> Result<Tensor> {
    let (outer, len, inner) = split_axis(t.shape(), axis, op)?;
    let x = t.data();
    let mut out = vec![0.0; outer * inner];
    for o in 0..outer {
        for j in 0..len {
            for i in 0..inner {
                out[o * inner + i] += x[(o * len + j) * inner + i];
            }
        }
    }
    for v in &mut out {
        *v *= c;
    }
    let mut shape = t.shape().to_vec();
    shape.remove(axis);
    Tensor::new(&shape, out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn softmax_uniform_logits() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::vector(vec![0.0, 0.0, 0.0]).unwrap());
        let s = g.softmax(x, 0).unwrap();
        assert!(close(g.value(s).data(), &[1.0 / 3.0; 3], 1e-15));
    }

    #[test]
    fn sum_of_softmax_has_zero_gradient() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::vector(vec![0.3, -1.2, 2.0, 0.1]).unwrap().with_requires_grad());
        let s = g.softmax(x, 0).unwrap();
        let total = g.sum(s);
        let grads = g.backward(total).unwrap();
        for v in grads.get(x).unwrap() {
            assert!(v.abs() < 1e-15, "{v}");
        }
    }

    #[test]
    fn reused_leaf_accumulates() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::vector(vec![1.0, 2.0]).unwrap().with_requires_grad());
        let y = g.add(x, x).unwrap();
        let s = g.sum(y);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[2.0, 2.0]);
    }

    #[test]
    fn shape_errors_are_reported() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]).unwrap());
        let b = g.constant(Tensor::zeros(&[2, 3]).unwrap());
        assert!(matches!(g.matmul(a, b), Err(TensorError::ShapeMismatch { .. })));
        let c = g.constant(Tensor::zeros(&[3]).unwrap());
        assert!(matches!(g.add(a, c), Err(TensorError::ShapeMismatch { .. })));
        assert!(g.softmax(a, 2).is_err());
        assert!(g.slice(a, 1, 2, 2).is_err());
    }

    #[test]
    fn non_scalar_backward_is_rejected() {
        let mut g = Graph::new();
        let a = g.leaf(Tensor::zeros(&[2]).unwrap().with_requires_grad());
        assert!(matches!(g.backward(a), Err(TensorError::NotScalar(_))));
    }

    #[test]
    fn concat_slice_pad_values() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::new(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let b = g.constant(Tensor::new(&[2, 1], vec![5.0, 6.0]).unwrap());
        let c = g.concat(&[a, b], 1).unwrap();
        assert_eq!(g.value(c).data(), &[1.0, 2.0, 5.0, 3.0, 4.0, 6.0]);
        let s = g.slice(c, 1, 1, 3).unwrap();
        assert_eq!(g.value(s).data(), &[2.0, 5.0, 4.0, 6.0]);
        let p = g.pad(a, 0, 1, 1).unwrap();
        assert_eq!(g.shape(p), &[4, 2]);
        assert_eq!(g.value(p).data(), &[0.0, 0.0, 1.0, 2.0, 3.0, 4.0, 0.0, 0.0]);
    }

    #[test]
    fn depthwise_conv_taps() {
        let mut g = Graph::new();
        let h = g.constant(Tensor::new(&[3, 1], vec![1.0, 2.0, 3.0]).unwrap());
        let identity = g.constant(Tensor::new(&[1, 3], vec![0.0, 1.0, 0.0]).unwrap());
        let delay = g.constant(Tensor::new(&[1, 3], vec![1.0, 0.0, 0.0]).unwrap());
        let even = g.constant(Tensor::new(&[1, 2], vec![1.0, 0.0]).unwrap());
        let o = g.depthwise_conv(h, identity).unwrap();
        assert_eq!(g.value(o).data(), &[1.0, 2.0, 3.0]);
        let o = g.depthwise_conv(h, delay).unwrap();
        assert_eq!(g.value(o).data(), &[0.0, 1.0, 2.0]);
        assert!(matches!(g.depthwise_conv(h, even), Err(TensorError::EvenKernel(2))));
    }

    #[test]
    fn bilinear_identity_form() {
        let mut g = Graph::new();
        let l = g.constant(Tensor::new(&[1, 2], vec![1.0, 2.0]).unwrap());
        let r = g.constant(Tensor::new(&[1, 2], vec![3.0, 4.0]).unwrap());
        let w = g.constant(Tensor::new(&[1, 2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let v = g.bilinear(l, r, w).unwrap();
        assert_eq!(g.value(v).data(), &[11.0]);
    }
}
