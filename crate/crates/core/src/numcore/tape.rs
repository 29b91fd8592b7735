//! Reverse-mode automatic differentiation over a linear recording.
//!
//! A [`Tape`] owns every value produced during a forward pass. Operations
//! append nodes whose inputs are always earlier nodes, so reverse index order
//! is a valid topological order for the backward sweep.

use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::kernels;
use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, Real),
    AddScalar(Var),
    Exp(Var),
    Sin(Var),
    Cos(Var),
    Tanh(Var),
    Sigmoid(Var),
    Softplus(Var),
    Square(Var),
    Abs(Var),
    Sum(Var),
    Mean(Var),
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    Dense { x: Var, w: Var, b: Var },
    Conv1d { x: Var, k: Var, b: Var },
    Gated(Var, Var),
    SplitCols { x: Var, start: usize },
    ConcatCols(Var, Var),
    AvgPool(Var),
    Upsample(Var),
    Embedding { ids: Vec<usize>, table: Var },
    RowNormalize(Var),
    RowSoftmax(Var),
    Dropout { x: Var, mask: Vec<Real> },
    Positions(Var),
    Outer(Var, Var),
    FrameOffsets(Var),
    PadRows(Var),
    CropRows(Var),
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        use Op::*;
        match self {
            Leaf => vec![],
            Add(a, b) | Sub(a, b) | Mul(a, b) | MatMul(a, b) | MatMulBt(a, b) | Gated(a, b)
            | ConcatCols(a, b) | Outer(a, b) => vec![*a, *b],
            Scale(x, _) | AddScalar(x) | Exp(x) | Sin(x) | Cos(x) | Tanh(x) | Sigmoid(x)
            | Softplus(x) | Square(x) | Abs(x) | Sum(x) | Mean(x) | AvgPool(x) | Upsample(x)
            | RowNormalize(x) | RowSoftmax(x) | Positions(x) | FrameOffsets(x) | PadRows(x)
            | CropRows(x) => vec![*x],
            SplitCols { x, .. } | Dropout { x, .. } => vec![*x],
            Dense { x, w, b } => vec![*x, *w, *b],
            Conv1d { x, k, b } => vec![*x, *k, *b],
            Embedding { table, .. } => vec![*table],
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    label: Option<&'static str>,
}

/// Gradient buffers produced by [`Tape::backward`], indexed by [`Var`].
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

/// Operation recorder. Evaluation of one tape is single-threaded; kernels
/// may fan out internally.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, a.shape(), b.shape()));
    }
    Ok(())
}

fn expect_matrix(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        other => Err(Error::shape(op, other, &[0, 0])),
    }
}

fn sigmoid(x: Real) -> Real {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: Real) -> Real {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Records a leaf. Gradients are only propagated into leaves created with
    /// `requires_grad`.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
            label: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Copies `v` into a fresh constant, cutting gradient flow.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    /// Attaches a label to a node, e.g. to audit dataflow after a forward pass.
    pub fn mark(&mut self, v: Var, label: &'static str) {
        self.nodes[v.0].label = Some(label);
    }

    pub fn marked(&self, label: &str) -> Vec<Var> {
        self.nodes
            .iter()
            .enumerate()
            .filter(|(_, n)| n.label == Some(label))
            .map(|(i, _)| Var(i))
            .collect()
    }

    /// Every node `v` transitively depends on, excluding `v` itself.
    pub fn ancestors(&self, v: Var) -> BTreeSet<Var> {
        let mut seen = BTreeSet::new();
        let mut stack = self.nodes[v.0].op.inputs();
        while let Some(u) = stack.pop() {
            if seen.insert(u) {
                stack.extend(self.nodes[u.0].op.inputs());
            }
        }
        seen
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        let inputs = op.inputs();
        debug_assert!(
            !inputs.iter().all(|i| self.value(*i).all_finite()) || value.all_finite(),
            "non-finite output from {op:?} on finite inputs"
        );
        let requires_grad = inputs.iter().any(|i| self.nodes[i.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            label: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn unary(&mut self, x: Var, f: impl Fn(Real) -> Real, op: Op) -> Var {
        let value = self.value(x).map(f);
        self.push(value, op)
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(Real, Real) -> Real,
        op: Op,
    ) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape(name, ta, tb)?;
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push(value, op))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, x: Var, c: Real) -> Var {
        self.unary(x, |v| v * c, Op::Scale(x, c))
    }

    pub fn add_scalar(&mut self, x: Var, c: Real) -> Var {
        self.unary(x, |v| v + c, Op::AddScalar(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, Real::exp, Op::Exp(x))
    }

    pub fn sin(&mut self, x: Var) -> Var {
        self.unary(x, Real::sin, Op::Sin(x))
    }

    pub fn cos(&mut self, x: Var) -> Var {
        self.unary(x, Real::cos, Op::Cos(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, Real::tanh, Op::Tanh(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid, Op::Sigmoid(x))
    }

    /// `ln(1 + e^x)`, evaluated without overflow.
    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(x, softplus, Op::Softplus(x))
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, |v| v * v, Op::Square(x))
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(x, Real::abs, Op::Abs(x))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        self.push(Tensor::scalar(s), Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let m = t.sum() / t.len().max(1) as Real;
        self.push(Tensor::scalar(m), Op::Mean(x))
    }

    /// `a[n x k] * b[k x m]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (n, k) = expect_matrix("matmul", ta)?;
        let (k2, m) = expect_matrix("matmul", tb)?;
        if k != k2 {
            return Err(Error::shape("matmul", ta.shape(), tb.shape()));
        }
        let out = kernels::matmul(ta.data(), tb.data(), n, k, m);
        Ok(self.push(Tensor::matrix(n, m, out), Op::MatMul(a, b)))
    }

    /// `a[n x k] * b[m x k]^T`
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (n, k) = expect_matrix("matmul_bt", ta)?;
        let (m, k2) = expect_matrix("matmul_bt", tb)?;
        if k != k2 {
            return Err(Error::shape("matmul_bt", ta.shape(), tb.shape()));
        }
        let out = kernels::matmul_bt(ta.data(), tb.data(), n, k, m);
        Ok(self.push(Tensor::matrix(n, m, out), Op::MatMulBt(a, b)))
    }

    /// Affine map `x W + b` with `x: N x Din`, `W: Din x Dout`, `b: Dout`.
    pub fn dense(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (tx, tw, tb) = (self.value(x), self.value(w), self.value(b));
        let (n, din) = expect_matrix("dense", tx)?;
        let (din2, dout) = expect_matrix("dense", tw)?;
        if din != din2 {
            return Err(Error::shape("dense", tx.shape(), tw.shape()));
        }
        if tb.len() != dout {
            return Err(Error::shape("dense bias", tw.shape(), tb.shape()));
        }
        let mut out = kernels::matmul(tx.data(), tw.data(), n, din, dout);
        for row in out.chunks_mut(dout) {
            for (o, &bv) in row.iter_mut().zip(tb.data()) {
                *o += bv;
            }
        }
        Ok(self.push(Tensor::matrix(n, dout, out), Op::Dense { x, w, b }))
    }

    /// Same-length convolution: `x: T x Cin`, `k: K x Cin x Cout`, `b: Cout`.
    pub fn conv1d(&mut self, x: Var, k: Var, b: Var) -> Result<Var> {
        let (tx, tk, tb) = (self.value(x), self.value(k), self.value(b));
        let (t, cin) = expect_matrix("conv1d", tx)?;
        let [ks, kin, cout] = match tk.shape() {
            [a, b, c] => [*a, *b, *c],
            other => return Err(Error::shape("conv1d kernel", other, &[0, cin, 0])),
        };
        if ks % 2 == 0 {
            return Err(Error::Config(format!("conv1d kernel size must be odd, got {ks}")));
        }
        if kin != cin {
            return Err(Error::shape("conv1d", tx.shape(), tk.shape()));
        }
        if tb.len() != cout {
            return Err(Error::shape("conv1d bias", tk.shape(), tb.shape()));
        }
        let out = kernels::conv1d(tx.data(), tk.data(), tb.data(), t, cin, cout, ks);
        Ok(self.push(Tensor::matrix(t, cout, out), Op::Conv1d { x, k, b }))
    }

    /// `tanh(a) * sigmoid(g)`
    pub fn gated(&mut self, a: Var, g: Var) -> Result<Var> {
        self.binary(
            "gated_activation",
            a,
            g,
            |x, y| x.tanh() * sigmoid(y),
            Op::Gated(a, g),
        )
    }

    /// Columns `start..start + len` of a matrix.
    pub fn split_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let tx = self.value(x);
        let (n, c) = expect_matrix("split_cols", tx)?;
        if start + len > c {
            return Err(Error::shape("split_cols", tx.shape(), &[n, start + len]));
        }
        let mut out = Vec::with_capacity(n * len);
        for i in 0..n {
            out.extend_from_slice(&tx.row(i)[start..start + len]);
        }
        Ok(self.push(Tensor::matrix(n, len, out), Op::SplitCols { x, start }))
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (n, ca) = expect_matrix("concat_cols", ta)?;
        let (n2, cb) = expect_matrix("concat_cols", tb)?;
        if n != n2 {
            return Err(Error::shape("concat_cols", ta.shape(), tb.shape()));
        }
        let mut out = Vec::with_capacity(n * (ca + cb));
        for i in 0..n {
            out.extend_from_slice(ta.row(i));
            out.extend_from_slice(tb.row(i));
        }
        Ok(self.push(Tensor::matrix(n, ca + cb, out), Op::ConcatCols(a, b)))
    }

    /// Stride-2 average pooling over rows; an odd trailing row is averaged
    /// with itself.
    pub fn avg_pool(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let (t, c) = expect_matrix("avg_pool1d", tx)?;
        if t == 0 {
            return Err(Error::shape("avg_pool1d", tx.shape(), &[1, c]));
        }
        let half = t.div_ceil(2);
        let mut out = vec![0.0; half * c];
        for (o, row) in out.chunks_mut(c).enumerate() {
            let a = tx.row(2 * o);
            let b = if 2 * o + 1 < t { tx.row(2 * o + 1) } else { a };
            for ((dst, &x0), &x1) in row.iter_mut().zip(a).zip(b) {
                *dst = 0.5 * (x0 + x1);
            }
        }
        Ok(self.push(Tensor::matrix(half, c, out), Op::AvgPool(x)))
    }

    /// Repeats every row twice and truncates to `target_len`, which must be
    /// `2T - 1` or `2T`.
    pub fn upsample(&mut self, x: Var, target_len: usize) -> Result<Var> {
        let tx = self.value(x);
        let (t, c) = expect_matrix("upsample_nearest", tx)?;
        if t == 0 || (target_len != 2 * t && target_len + 1 != 2 * t) {
            return Err(Error::Domain(format!(
                "upsample target length {target_len} not in {{{}, {}}}",
                (2 * t).saturating_sub(1),
                2 * t
            )));
        }
        let mut out = Vec::with_capacity(target_len * c);
        for j in 0..target_len {
            out.extend_from_slice(tx.row(j / 2));
        }
        Ok(self.push(Tensor::matrix(target_len, c, out), Op::Upsample(x)))
    }

    /// Row gather from a `V x D` table.
    pub fn embedding(&mut self, ids: &[usize], table: Var) -> Result<Var> {
        let tt = self.value(table);
        let (v, d) = expect_matrix("embedding", tt)?;
        let mut out = Vec::with_capacity(ids.len() * d);
        for (position, &id) in ids.iter().enumerate() {
            if id >= v {
                return Err(Error::Index {
                    op: "embedding",
                    index: id,
                    bound: v,
                    position,
                });
            }
            out.extend_from_slice(tt.row(id));
        }
        let value = Tensor::matrix(ids.len(), d, out);
        Ok(self.push(
            value,
            Op::Embedding {
                ids: ids.to_vec(),
                table,
            },
        ))
    }

    /// Divides every row by its sum. Rows whose sum has magnitude `<= eps`
    /// are rejected.
    pub fn row_normalize(&mut self, x: Var, eps: Real) -> Result<Var> {
        let tx = self.value(x);
        let (n, c) = expect_matrix("row_normalize", tx)?;
        let mut out = tx.data().to_vec();
        for (row, chunk) in out.chunks_mut(c).enumerate().take(n) {
            let s: Real = chunk.iter().sum();
            if s.abs() <= eps || !s.is_finite() {
                return Err(Error::DegenerateAttention { row, sum: s, eps });
            }
            chunk.iter_mut().for_each(|v| *v /= s);
        }
        Ok(self.push(Tensor::matrix(n, c, out), Op::RowNormalize(x)))
    }

    pub fn row_softmax(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let (n, c) = expect_matrix("row_softmax", tx)?;
        let mut out = tx.data().to_vec();
        for chunk in out.chunks_mut(c).take(n) {
            let m = chunk.iter().copied().fold(Real::NEG_INFINITY, Real::max);
            let mut s = 0.0;
            for v in chunk.iter_mut() {
                *v = (*v - m).exp();
                s += *v;
            }
            chunk.iter_mut().for_each(|v| *v /= s);
        }
        Ok(self.push(Tensor::matrix(n, c, out), Op::RowSoftmax(x)))
    }

    /// Inverted dropout: survivors are scaled by `1 / (1 - p)`, and inference
    /// mode is the identity.
    pub fn dropout(&mut self, x: Var, p: Real, training: bool, seed: u64) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Config(format!("dropout probability {p} not in [0, 1)")));
        }
        if !training || p == 0.0 {
            return Ok(x);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let keep = 1.0 / (1.0 - p);
        let mask: Vec<Real> = (0..self.value(x).len())
            .map(|_| if rng.gen::<Real>() < p { 0.0 } else { keep })
            .collect();
        let tx = self.value(x);
        let data = tx.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        let value = Tensor::new(tx.shape().to_vec(), data)?;
        Ok(self.push(value, Op::Dropout { x, mask }))
    }

    /// Cumulative midpoints `s_i = sum_{k<i} r_k + r_i / 2` of a width vector.
    pub fn positions(&mut self, r: Var) -> Var {
        let tr = self.value(r);
        let mut acc = 0.0;
        let s: Vec<Real> = tr
            .data()
            .iter()
            .map(|&ri| {
                let si = acc + 0.5 * ri;
                acc += ri;
                si
            })
            .collect();
        self.push(Tensor::vector(s), Op::Positions(r))
    }

    /// `out[i][k] = a_i * b_k` for vectors `a` and `b`.
    pub fn outer(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        let (n, m) = (ta.len(), tb.len());
        let mut out = Vec::with_capacity(n * m);
        for &x in ta.data() {
            out.extend(tb.data().iter().map(|&y| x * y));
        }
        self.push(Tensor::matrix(n, m, out), Op::Outer(a, b))
    }

    /// `out[j][i] = j - s_i` for frames `j in 0..frames`.
    pub fn frame_offsets(&mut self, s: Var, frames: usize) -> Var {
        let ts = self.value(s);
        let n = ts.len();
        let mut out = Vec::with_capacity(frames * n);
        for j in 0..frames {
            out.extend(ts.data().iter().map(|&si| j as Real - si));
        }
        self.push(Tensor::matrix(frames, n, out), Op::FrameOffsets(s))
    }

    /// Appends zero rows until the matrix has `rows` rows.
    pub fn pad_rows(&mut self, x: Var, rows: usize) -> Result<Var> {
        let tx = self.value(x);
        let (t, c) = expect_matrix("pad_rows", tx)?;
        if rows < t {
            return Err(Error::shape("pad_rows", tx.shape(), &[rows, c]));
        }
        if rows == t {
            return Ok(x);
        }
        let mut data = tx.data().to_vec();
        data.resize(rows * c, 0.0);
        Ok(self.push(Tensor::matrix(rows, c, data), Op::PadRows(x)))
    }

    /// Keeps the first `rows` rows.
    pub fn crop_rows(&mut self, x: Var, rows: usize) -> Result<Var> {
        let tx = self.value(x);
        let (t, c) = expect_matrix("crop_rows", tx)?;
        if rows > t {
            return Err(Error::shape("crop_rows", tx.shape(), &[rows, c]));
        }
        if rows == t {
            return Ok(x);
        }
        let data = tx.data()[..rows * c].to_vec();
        Ok(self.push(Tensor::matrix(rows, c, data), Op::CropRows(x)))
    }

    /// Reverse sweep from a scalar `loss`. Gradients accumulate additively
    /// where a value is used more than once.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let tl = self.value(loss);
        if tl.len() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                tl.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(tl.shape(), 1.0));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.backprop(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn backprop(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        use Op::*;
        let gd = g.data();
        let out = &node.value;
        match &node.op {
            Leaf => {}
            Add(a, b) => {
                self.acc_with(grads, *a, |d| zip_add(d, gd));
                self.acc_with(grads, *b, |d| zip_add(d, gd));
            }
            Sub(a, b) => {
                self.acc_with(grads, *a, |d| zip_add(d, gd));
                self.acc_with(grads, *b, |d| d.iter_mut().zip(gd).for_each(|(o, &g)| *o -= g));
            }
            Mul(a, b) => {
                let (ta, tb) = (self.value(*a).data(), self.value(*b).data());
                self.acc_with(grads, *a, |d| {
                    for ((o, &g), &y) in d.iter_mut().zip(gd).zip(tb) {
                        *o += g * y;
                    }
                });
                self.acc_with(grads, *b, |d| {
                    for ((o, &g), &x) in d.iter_mut().zip(gd).zip(ta) {
                        *o += g * x;
                    }
                });
            }
            Scale(x, c) => self.acc_with(grads, *x, |d| {
                d.iter_mut().zip(gd).for_each(|(o, &g)| *o += g * c)
            }),
            AddScalar(x) => self.acc_with(grads, *x, |d| zip_add(d, gd)),
            Exp(x) => self.elementwise(grads, *x, gd, |_, y| y, out.data()),
            Sin(x) => self.elementwise(grads, *x, gd, |x, _| x.cos(), out.data()),
            Cos(x) => self.elementwise(grads, *x, gd, |x, _| -x.sin(), out.data()),
            Tanh(x) => self.elementwise(grads, *x, gd, |_, y| 1.0 - y * y, out.data()),
            Sigmoid(x) => self.elementwise(grads, *x, gd, |_, y| y * (1.0 - y), out.data()),
            Softplus(x) => self.elementwise(grads, *x, gd, |x, _| sigmoid(x), out.data()),
            Square(x) => self.elementwise(grads, *x, gd, |x, _| 2.0 * x, out.data()),
            Abs(x) => self.elementwise(grads, *x, gd, |x, _| sign(x), out.data()),
            Sum(x) => {
                let g0 = gd[0];
                self.acc_with(grads, *x, |d| d.iter_mut().for_each(|o| *o += g0));
            }
            Mean(x) => {
                let n = self.value(*x).len().max(1) as Real;
                let g0 = gd[0] / n;
                self.acc_with(grads, *x, |d| d.iter_mut().for_each(|o| *o += g0));
            }
            MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (n, k) = (ta.rows(), ta.cols());
                let m = tb.cols();
                self.acc_with(grads, *a, |d| {
                    kernels::matmul_bt_acc(gd, tb.data(), n, m, k, d)
                });
                self.acc_with(grads, *b, |d| {
                    kernels::matmul_at_acc(ta.data(), gd, n, k, m, d)
                });
            }
            MatMulBt(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (n, k) = (ta.rows(), ta.cols());
                let m = tb.rows();
                self.acc_with(grads, *a, |d| {
                    let prod = kernels::matmul(gd, tb.data(), n, m, k);
                    zip_add(d, &prod);
                });
                self.acc_with(grads, *b, |d| {
                    kernels::matmul_at_acc(gd, ta.data(), n, m, k, d)
                });
            }
            Dense { x, w, b } => {
                let (tx, tw) = (self.value(*x), self.value(*w));
                let (n, din) = (tx.rows(), tx.cols());
                let dout = tw.cols();
                self.acc_with(grads, *x, |d| {
                    kernels::matmul_bt_acc(gd, tw.data(), n, dout, din, d)
                });
                self.acc_with(grads, *w, |d| {
                    kernels::matmul_at_acc(tx.data(), gd, n, din, dout, d)
                });
                self.acc_with(grads, *b, |d| {
                    for row in gd.chunks(dout) {
                        zip_add(d, row);
                    }
                });
            }
            Conv1d { x, k, b } => {
                let (tx, tk) = (self.value(*x), self.value(*k));
                let (t, cin) = (tx.rows(), tx.cols());
                let (ks, cout) = (tk.shape()[0], tk.shape()[2]);
                let mut dx = self.grad_buf_if(*x, grads);
                let mut dk = self.grad_buf_if(*k, grads);
                let mut db = self.grad_buf_if(*b, grads);
                kernels::conv1d_backward(
                    tx.data(),
                    tk.data(),
                    gd,
                    t,
                    cin,
                    cout,
                    ks,
                    dx.as_mut().map(|t| t.data_mut()),
                    dk.as_mut().map(|t| t.data_mut()),
                    db.as_mut().map(|t| t.data_mut()),
                );
                for (v, buf) in [(*x, dx), (*k, dk), (*b, db)] {
                    if let Some(buf) = buf {
                        grads[v.0] = Some(buf);
                    }
                }
            }
            Gated(a, g2) => {
                let (ta, tg) = (self.value(*a).data(), self.value(*g2).data());
                self.acc_with(grads, *a, |d| {
                    for (i, o) in d.iter_mut().enumerate() {
                        let th = ta[i].tanh();
                        *o += gd[i] * (1.0 - th * th) * sigmoid(tg[i]);
                    }
                });
                self.acc_with(grads, *g2, |d| {
                    for (i, o) in d.iter_mut().enumerate() {
                        let s = sigmoid(tg[i]);
                        *o += gd[i] * ta[i].tanh() * s * (1.0 - s);
                    }
                });
            }
            SplitCols { x, start } => {
                let c = self.value(*x).cols();
                let len = out.cols();
                let start = *start;
                self.acc_with(grads, *x, |d| {
                    for (row, grow) in d.chunks_mut(c).zip(gd.chunks(len)) {
                        zip_add(&mut row[start..start + len], grow);
                    }
                });
            }
            ConcatCols(a, b) => {
                let ca = self.value(*a).cols();
                let c = out.cols();
                self.acc_with(grads, *a, |d| {
                    for (row, grow) in d.chunks_mut(ca).zip(gd.chunks(c)) {
                        zip_add(row, &grow[..ca]);
                    }
                });
                let cb = c - ca;
                self.acc_with(grads, *b, |d| {
                    for (row, grow) in d.chunks_mut(cb).zip(gd.chunks(c)) {
                        zip_add(row, &grow[ca..]);
                    }
                });
            }
            AvgPool(x) => {
                let (t, c) = (self.value(*x).rows(), out.cols());
                self.acc_with(grads, *x, |d| {
                    for (o, grow) in gd.chunks(c).enumerate() {
                        if 2 * o + 1 < t {
                            for (ci, &gv) in grow.iter().enumerate() {
                                d[2 * o * c + ci] += 0.5 * gv;
                                d[(2 * o + 1) * c + ci] += 0.5 * gv;
                            }
                        } else {
                            zip_add(&mut d[2 * o * c..(2 * o + 1) * c], grow);
                        }
                    }
                });
            }
            Upsample(x) => {
                let c = out.cols();
                self.acc_with(grads, *x, |d| {
                    for (j, grow) in gd.chunks(c).enumerate() {
                        zip_add(&mut d[(j / 2) * c..(j / 2 + 1) * c], grow);
                    }
                });
            }
            Embedding { ids, table } => {
                let c = out.cols();
                self.acc_with(grads, *table, |d| {
                    for (&id, grow) in ids.iter().zip(gd.chunks(c)) {
                        zip_add(&mut d[id * c..(id + 1) * c], grow);
                    }
                });
            }
            RowNormalize(x) => {
                let tx = self.value(*x);
                let c = out.cols();
                self.acc_with(grads, *x, |d| {
                    for ((drow, grow), (yrow, xrow)) in d
                        .chunks_mut(c)
                        .zip(gd.chunks(c))
                        .zip(out.data().chunks(c).zip(tx.data().chunks(c)))
                    {
                        let s: Real = xrow.iter().sum();
                        let gy: Real = grow.iter().zip(yrow).map(|(g, y)| g * y).sum();
                        for (o, &gv) in drow.iter_mut().zip(grow) {
                            *o += (gv - gy) / s;
                        }
                    }
                });
            }
            RowSoftmax(x) => {
                let c = out.cols();
                self.acc_with(grads, *x, |d| {
                    for ((drow, grow), yrow) in
                        d.chunks_mut(c).zip(gd.chunks(c)).zip(out.data().chunks(c))
                    {
                        let gy: Real = grow.iter().zip(yrow).map(|(g, y)| g * y).sum();
                        for ((o, &gv), &y) in drow.iter_mut().zip(grow).zip(yrow) {
                            *o += y * (gv - gy);
                        }
                    }
                });
            }
            Dropout { x, mask } => self.acc_with(grads, *x, |d| {
                for ((o, &gv), &m) in d.iter_mut().zip(gd).zip(mask) {
                    *o += gv * m;
                }
            }),
            Positions(r) => self.acc_with(grads, *r, |d| {
                // ds_i/dr_k = 1 for k < i, 1/2 for k = i
                let mut suffix = 0.0;
                for k in (0..d.len()).rev() {
                    d[k] += 0.5 * gd[k] + suffix;
                    suffix += gd[k];
                }
            }),
            Outer(a, b) => {
                let (ta, tb) = (self.value(*a).data(), self.value(*b).data());
                let m = tb.len();
                self.acc_with(grads, *a, |d| {
                    for (i, o) in d.iter_mut().enumerate() {
                        *o += gd[i * m..(i + 1) * m]
                            .iter()
                            .zip(tb)
                            .map(|(g, y)| g * y)
                            .sum::<Real>();
                    }
                });
                self.acc_with(grads, *b, |d| {
                    for (i, &x) in ta.iter().enumerate() {
                        for (o, &gv) in d.iter_mut().zip(&gd[i * m..(i + 1) * m]) {
                            *o += gv * x;
                        }
                    }
                });
            }
            FrameOffsets(s) => {
                let n = self.value(*s).len();
                self.acc_with(grads, *s, |d| {
                    for grow in gd.chunks(n) {
                        d.iter_mut().zip(grow).for_each(|(o, &gv)| *o -= gv);
                    }
                });
            }
            PadRows(x) => {
                let len = self.value(*x).len();
                self.acc_with(grads, *x, |d| zip_add(d, &gd[..len]));
            }
            CropRows(x) => self.acc_with(grads, *x, |d| zip_add(&mut d[..gd.len()], gd)),
        }
    }

    fn elementwise(
        &self,
        grads: &mut [Option<Tensor>],
        x: Var,
        gd: &[Real],
        deriv: impl Fn(Real, Real) -> Real,
        out: &[Real],
    ) {
        let tx = self.value(x).data();
        self.acc_with(grads, x, |d| {
            for (i, o) in d.iter_mut().enumerate() {
                *o += gd[i] * deriv(tx[i], out[i]);
            }
        });
    }

    fn grad_buf_if(&self, v: Var, grads: &mut [Option<Tensor>]) -> Option<Tensor> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        Some(
            grads[v.0]
                .take()
                .unwrap_or_else(|| Tensor::zeros(self.value(v).shape())),
        )
    }

    fn acc_with(&self, grads: &mut [Option<Tensor>], v: Var, f: impl FnOnce(&mut [Real])) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let buf = grads[v.0].get_or_insert_with(|| Tensor::zeros(self.value(v).shape()));
        f(buf.data_mut());
    }
}

fn zip_add(dst: &mut [Real], src: &[Real]) {
    dst.iter_mut().zip(src).for_each(|(o, &g)| *o += g);
}

fn sign(x: Real) -> Real {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}
