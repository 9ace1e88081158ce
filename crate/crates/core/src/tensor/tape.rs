use std::collections::HashMap;
use std::sync::Arc;

use super::{gemm, Tensor};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddN(Vec<usize>),
    Scale(usize, f64),
    /// Matrix plus a bias vector broadcast over rows.
    AddBias(usize, usize),
    /// Matrix times an R×1 column broadcast over columns.
    MulCol(usize, usize),
    /// Matrix times a width-C vector broadcast over rows.
    MulRow(usize, usize),
    Silu(usize),
    Sigmoid(usize),
    SoftmaxRows(usize),
    LogSoftmaxRows(usize),
    LayerNorm {
        x: usize,
        gain: usize,
        bias: usize,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Transpose(usize),
    ConcatRows(Vec<usize>),
    ConcatCols(Vec<usize>),
    SliceRows(usize, usize),
    SliceCols(usize, usize),
    GatherRows(usize, Vec<usize>),
    ScatterRows(usize, Vec<usize>),
    GatherElements(usize, Vec<(usize, usize)>),
    NormalizeRows(usize),
    Reshape(usize),
    Sum(usize),
    DepthwiseConv {
        x: usize,
        kernel: usize,
        bias: usize,
    },
    /// Scalar loss with a precomputed gradient with respect to its input.
    FixedGrad(usize, Tensor),
}

impl Op {
    fn inputs(&self) -> Vec<usize> {
        use Op::*;
        match self {
            Leaf => vec![],
            MatMul(a, b) | Add(a, b) | Sub(a, b) | Mul(a, b) | AddBias(a, b) | MulCol(a, b)
            | MulRow(a, b) => vec![*a, *b],
            AddN(v) | ConcatRows(v) | ConcatCols(v) => v.clone(),
            Scale(a, _)
            | Silu(a)
            | Sigmoid(a)
            | SoftmaxRows(a)
            | LogSoftmaxRows(a)
            | Transpose(a)
            | SliceRows(a, _)
            | SliceCols(a, _)
            | GatherRows(a, _)
            | ScatterRows(a, _)
            | GatherElements(a, _)
            | NormalizeRows(a)
            | Reshape(a)
            | Sum(a)
            | FixedGrad(a, _) => vec![*a],
            LayerNorm { x, gain, bias, .. } => vec![*x, *gain, *bias],
            DepthwiseConv { x, kernel, bias } => vec![*x, *kernel, *bias],
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Arc<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Record of executed operations, in execution (hence topological) order.
///
/// A tape is single-owner and `Send`: independent tapes over the same
/// [`ParamStore`] can run on different threads.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
    grads: Vec<Option<Tensor>>,
    backward_done: bool,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn check_matrix(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    if t.shape().len() != 2 {
        return Err(Error::shape(op, t.shape(), &[0, 0]));
    }
    Ok((t.shape()[0], t.shape()[1]))
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        let requires_grad = op.inputs().iter().any(|&i| self.nodes[i].requires_grad);
        self.push_arc(Arc::new(value), op, requires_grad)
    }

    fn push_arc(&mut self, value: Arc<Tensor>, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push_arc(Arc::new(value), Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// The trainable leaf for `id`, created on first use and shared after.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push_arc(store.shared(id), Op::Leaf, true);
        self.params.insert(id, v);
        v
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    // ---- forward ops -------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k) = check_matrix("matmul", ta)?;
        let (k2, n) = check_matrix("matmul", tb)?;
        if k != k2 {
            return Err(Error::shape("matmul", ta.shape(), tb.shape()));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, ta.data(), false, tb.data(), false, &mut out, false);
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::MatMul(a.0, b.0)))
    }

    fn zip_same(&mut self, op_name: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::shape(op_name, ta.shape(), tb.shape()));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Ok(Tensor::from_parts(ta.shape().to_vec(), data))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same("add", a, b, |x, y| x + y)?;
        Ok(self.push(t, Op::Add(a.0, b.0)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same("sub", a, b, |x, y| x - y)?;
        Ok(self.push(t, Op::Sub(a.0, b.0)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same("mul", a, b, |x, y| x * y)?;
        Ok(self.push(t, Op::Mul(a.0, b.0)))
    }

    pub fn add_n(&mut self, xs: &[Var]) -> Result<Var> {
        let first = *xs
            .first()
            .ok_or_else(|| Error::Autodiff("add_n of no operands".into()))?;
        let mut acc = self.value(first).clone();
        for &x in &xs[1..] {
            let t = self.value(x);
            if t.shape() != acc.shape() {
                return Err(Error::shape("add_n", acc.shape(), t.shape()));
            }
            acc.add_assign(t);
        }
        Ok(self.push(acc, Op::AddN(xs.iter().map(|v| v.0).collect())))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let t = self.value(a);
        let data = t.data().iter().map(|v| v * s).collect();
        let t = Tensor::from_parts(t.shape().to_vec(), data);
        self.push(t, Op::Scale(a.0, s))
    }

    /// `x + bias` with `bias` broadcast over every row of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(bias));
        let c = tx.cols();
        if tb.numel() != c {
            return Err(Error::shape("add_bias", tx.shape(), tb.shape()));
        }
        let mut data = tx.data().to_vec();
        for row in data.chunks_mut(c) {
            for (v, b) in row.iter_mut().zip(tb.data()) {
                *v += b;
            }
        }
        let t = Tensor::from_parts(tx.shape().to_vec(), data);
        Ok(self.push(t, Op::AddBias(x.0, bias.0)))
    }

    /// Scales row `r` of `x` by `w[r]`, where `w` has one entry per row.
    pub fn mul_col(&mut self, x: Var, w: Var) -> Result<Var> {
        let (tx, tw) = (self.value(x), self.value(w));
        let c = tx.cols();
        if tw.numel() != tx.rows() {
            return Err(Error::shape("mul_col", tx.shape(), tw.shape()));
        }
        let mut data = tx.data().to_vec();
        for (row, &s) in data.chunks_mut(c).zip(tw.data()) {
            row.iter_mut().for_each(|v| *v *= s);
        }
        let t = Tensor::from_parts(tx.shape().to_vec(), data);
        Ok(self.push(t, Op::MulCol(x.0, w.0)))
    }

    /// Multiplies every row of `x` elementwise by the vector `r`.
    pub fn mul_row(&mut self, x: Var, r: Var) -> Result<Var> {
        let (tx, tr) = (self.value(x), self.value(r));
        let c = tx.cols();
        if tr.numel() != c {
            return Err(Error::shape("mul_row", tx.shape(), tr.shape()));
        }
        let mut data = tx.data().to_vec();
        for row in data.chunks_mut(c) {
            for (v, s) in row.iter_mut().zip(tr.data()) {
                *v *= s;
            }
        }
        let t = Tensor::from_parts(tx.shape().to_vec(), data);
        Ok(self.push(t, Op::MulRow(x.0, r.0)))
    }

    fn map(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let t = self.value(x);
        let data = t.data().iter().map(|&v| f(v)).collect();
        let t = Tensor::from_parts(t.shape().to_vec(), data);
        self.push(t, op)
    }

    pub fn silu(&mut self, x: Var) -> Var {
        self.map(x, |v| v * sigmoid(v), Op::Silu(x.0))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.map(x, sigmoid, Op::Sigmoid(x.0))
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let t = super::softmax_rows(self.value(x));
        self.push(t, Op::SoftmaxRows(x.0))
    }

    pub fn log_softmax_rows(&mut self, x: Var) -> Var {
        let t = super::log_softmax_rows(self.value(x));
        self.push(t, Op::LogSoftmaxRows(x.0))
    }

    /// Normalizes each row to zero mean and unit variance (with `eps` inside
    /// the square root), then applies `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (tx, tg, tb) = (self.value(x), self.value(gain), self.value(bias));
        let d = tx.cols();
        if d < 2 {
            return Err(Error::Config(format!("layer norm needs width >= 2, got {d}")));
        }
        if tg.numel() != d || tb.numel() != d {
            return Err(Error::shape("layer_norm", tx.shape(), tg.shape()));
        }
        let rows = tx.rows();
        let mut xhat = vec![0.0; rows * d];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; rows * d];
        for r in 0..rows {
            let row = tx.row(r);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let s = 1.0 / (var + eps).sqrt();
            rstd[r] = s;
            for c in 0..d {
                let h = (row[c] - mean) * s;
                xhat[r * d + c] = h;
                out[r * d + c] = h * tg.data()[c] + tb.data()[c];
            }
        }
        let t = Tensor::from_parts(tx.shape().to_vec(), out);
        Ok(self.push(
            t,
            Op::LayerNorm {
                x: x.0,
                gain: gain.0,
                bias: bias.0,
                xhat,
                rstd,
            },
        ))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let (r, c) = check_matrix("transpose", t)?;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = t.data()[i * c + j];
            }
        }
        Ok(self.push(Tensor::from_parts(vec![c, r], out), Op::Transpose(x.0)))
    }

    pub fn concat_rows(&mut self, xs: &[Var]) -> Result<Var> {
        let first = *xs
            .first()
            .ok_or_else(|| Error::Autodiff("concat_rows of no operands".into()))?;
        let c = self.value(first).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &x in xs {
            let t = self.value(x);
            if t.cols() != c {
                return Err(Error::shape("concat_rows", self.value(first).shape(), t.shape()));
            }
            rows += t.rows();
            data.extend_from_slice(t.data());
        }
        let t = Tensor::from_parts(vec![rows, c], data);
        Ok(self.push(t, Op::ConcatRows(xs.iter().map(|v| v.0).collect())))
    }

    pub fn concat_cols(&mut self, xs: &[Var]) -> Result<Var> {
        let first = *xs
            .first()
            .ok_or_else(|| Error::Autodiff("concat_cols of no operands".into()))?;
        let rows = self.value(first).rows();
        let mut total = 0;
        for &x in xs {
            let t = self.value(x);
            if t.rows() != rows {
                return Err(Error::shape("concat_cols", self.value(first).shape(), t.shape()));
            }
            total += t.cols();
        }
        let mut data = vec![0.0; rows * total];
        let mut offset = 0;
        for &x in xs {
            let t = self.value(x);
            let c = t.cols();
            for r in 0..rows {
                data[r * total + offset..r * total + offset + c].copy_from_slice(t.row(r));
            }
            offset += c;
        }
        let t = Tensor::from_parts(vec![rows, total], data);
        Ok(self.push(t, Op::ConcatCols(xs.iter().map(|v| v.0).collect())))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let t = self.value(x).slice_rows(start, end)?;
        Ok(self.push(t, Op::SliceRows(x.0, start)))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let t = self.value(x);
        let c = t.cols();
        if start >= end || end > c {
            return Err(Error::Input(format!("column slice {start}..{end} out of range for {c} columns")));
        }
        let w = end - start;
        let rows = t.rows();
        let mut data = Vec::with_capacity(rows * w);
        for r in 0..rows {
            data.extend_from_slice(&t.row(r)[start..end]);
        }
        let t = Tensor::from_parts(vec![rows, w], data);
        Ok(self.push(t, Op::SliceCols(x.0, start)))
    }

    /// `out[i] = x[idx[i]]`.
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let t = self.value(x);
        let (rows, c) = (t.rows(), t.cols());
        if idx.is_empty() {
            return Err(Error::Input("gather_rows with no indices".into()));
        }
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            if i >= rows {
                return Err(Error::Input(format!("row index {i} out of range for {rows} rows")));
            }
            data.extend_from_slice(t.row(i));
        }
        let t = Tensor::from_parts(vec![idx.len(), c], data);
        Ok(self.push(t, Op::GatherRows(x.0, idx.to_vec())))
    }

    /// Places row `i` of `x` at row `idx[i]` of an `n_rows`-row zero matrix,
    /// summing rows that share a destination.
    pub fn scatter_rows(&mut self, x: Var, idx: &[usize], n_rows: usize) -> Result<Var> {
        let t = self.value(x);
        let c = t.cols();
        if idx.len() != t.rows() {
            return Err(Error::shape("scatter_rows", t.shape(), &[idx.len()]));
        }
        let mut data = vec![0.0; n_rows * c];
        for (src, &dst) in idx.iter().enumerate() {
            if dst >= n_rows {
                return Err(Error::Input(format!("scatter row {dst} out of range for {n_rows} rows")));
            }
            for (o, v) in data[dst * c..(dst + 1) * c].iter_mut().zip(t.row(src)) {
                *o += v;
            }
        }
        let t = Tensor::from_parts(vec![n_rows, c], data);
        Ok(self.push(t, Op::ScatterRows(x.0, idx.to_vec())))
    }

    /// Picks `x[r, c]` for each `(r, c)`; the result is a column (n×1).
    pub fn gather_elements(&mut self, x: Var, at: &[(usize, usize)]) -> Result<Var> {
        let t = self.value(x);
        let (rows, cols) = (t.rows(), t.cols());
        if at.is_empty() {
            return Err(Error::Input("gather_elements with no indices".into()));
        }
        let mut data = Vec::with_capacity(at.len());
        for &(r, c) in at {
            if r >= rows || c >= cols {
                return Err(Error::Input(format!("element ({r}, {c}) out of range for {rows}x{cols}")));
            }
            data.push(t.get(r, c));
        }
        let t = Tensor::from_parts(vec![at.len(), 1], data);
        Ok(self.push(t, Op::GatherElements(x.0, at.to_vec())))
    }

    /// Divides each row by its sum. Rows must have a nonzero sum.
    pub fn normalize_rows(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let c = t.cols();
        let mut data = t.data().to_vec();
        for row in data.chunks_mut(c) {
            let s: f64 = row.iter().sum();
            if s == 0.0 || !s.is_finite() {
                return Err(Error::Numeric(format!("normalize_rows with row sum {s}")));
            }
            row.iter_mut().for_each(|v| *v /= s);
        }
        let t = Tensor::from_parts(t.shape().to_vec(), data);
        Ok(self.push(t, Op::NormalizeRows(x.0)))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape.to_vec())?;
        Ok(self.push(t, Op::Reshape(x.0)))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x.0))
    }

    /// Depthwise 1-D convolution along rows (time) with "same" zero padding.
    /// `kernel` is C×K with odd K; `bias` has C entries.
    pub fn depthwise_conv(&mut self, x: Var, kernel: Var, bias: Var) -> Result<Var> {
        let (tx, tk, tb) = (self.value(x), self.value(kernel), self.value(bias));
        let (len, c) = (tx.rows(), tx.cols());
        let (kc, k) = check_matrix("depthwise_conv", tk)?;
        if kc != c || tb.numel() != c || k % 2 == 0 {
            return Err(Error::shape("depthwise_conv", tx.shape(), tk.shape()));
        }
        let pad = k / 2;
        let mut out = vec![0.0; len * c];
        for t in 0..len {
            for ch in 0..c {
                let mut acc = tb.data()[ch];
                for j in 0..k {
                    let src = t + j;
                    if src < pad || src - pad >= len {
                        continue;
                    }
                    acc += tk.data()[ch * k + j] * tx.data()[(src - pad) * c + ch];
                }
                out[t * c + ch] = acc;
            }
        }
        let t = Tensor::from_parts(vec![len, c], out);
        Ok(self.push(
            t,
            Op::DepthwiseConv {
                x: x.0,
                kernel: kernel.0,
                bias: bias.0,
            },
        ))
    }

    /// Records a scalar whose gradient with respect to `x` is known in closed
    /// form. Used by losses that compute their own gradient (CTC).
    pub fn fixed_grad_scalar(&mut self, x: Var, value: f64, grad: Tensor) -> Result<Var> {
        if grad.shape() != self.shape(x) {
            return Err(Error::shape("fixed_grad_scalar", self.shape(x), grad.shape()));
        }
        Ok(self.push(Tensor::scalar(value), Op::FixedGrad(x.0, grad)))
    }

    // ---- backward ----------------------------------------------------

    /// Populates gradients of `loss` with respect to every node that
    /// requires one. A second call without [`Tape::zero_grad`] is an error.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::Autodiff(
                "backward already ran on this tape; call zero_grad first".into(),
            ));
        }
        let root = &self.nodes[loss.0];
        if root.value.numel() != 1 {
            return Err(Error::Autodiff(format!(
                "backward needs a scalar loss, got shape {:?}",
                root.value.shape()
            )));
        }
        if !root.requires_grad {
            return Err(Error::Autodiff("loss is detached from every trainable leaf".into()));
        }
        self.backward_done = true;
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::full(root.value.shape(), 1.0));

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let is_leaf = matches!(self.nodes[i].op, Op::Leaf);
            if is_leaf {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
        }
        // Only leaves keep their buffers; interior gradients were consumed.
        self.grads = grads;
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        self.grads.clear();
        self.backward_done = false;
    }

    /// Gradient of the last backward pass with respect to a leaf.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Moves out the gradients of every parameter leaf touched by this tape.
    pub fn take_param_grads(&mut self) -> Vec<(ParamId, Tensor)> {
        let mut out: Vec<(ParamId, Tensor)> = self
            .params
            .iter()
            .filter_map(|(&id, &v)| self.grads.get_mut(v.0).and_then(Option::take).map(|g| (id, g)))
            .collect();
        out.sort_by_key(|(id, _)| *id);
        out
    }

    fn accum(&self, grads: &mut [Option<Tensor>], idx: usize, g: Tensor) {
        if !self.nodes[idx].requires_grad {
            return;
        }
        match &mut grads[idx] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn needs(&self, idx: usize) -> bool {
        self.nodes[idx].requires_grad
    }

    fn propagate(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let out = &*self.nodes[i].value;
        let val = |j: usize| -> &Tensor { &self.nodes[j].value };
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                if self.needs(*a) {
                    let mut da = vec![0.0; m * k];
                    gemm(m, n, k, g.data(), false, tb.data(), true, &mut da, false);
                    self.accum(grads, *a, Tensor::from_parts(vec![m, k], da));
                }
                if self.needs(*b) {
                    let mut db = vec![0.0; k * n];
                    gemm(k, m, n, ta.data(), true, g.data(), false, &mut db, false);
                    self.accum(grads, *b, Tensor::from_parts(vec![k, n], db));
                }
            }
            Op::Add(a, b) => {
                self.accum(grads, *a, g.clone());
                self.accum(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accum(grads, *a, g.clone());
                if self.needs(*b) {
                    let neg = g.data().iter().map(|v| -v).collect();
                    self.accum(grads, *b, Tensor::from_parts(g.shape().to_vec(), neg));
                }
            }
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    let d = g.data().iter().zip(val(*b).data()).map(|(x, y)| x * y).collect();
                    self.accum(grads, *a, Tensor::from_parts(g.shape().to_vec(), d));
                }
                if self.needs(*b) {
                    let d = g.data().iter().zip(val(*a).data()).map(|(x, y)| x * y).collect();
                    self.accum(grads, *b, Tensor::from_parts(g.shape().to_vec(), d));
                }
            }
            Op::AddN(xs) => {
                for &x in xs {
                    self.accum(grads, x, g.clone());
                }
            }
            Op::Scale(a, s) => {
                let d = g.data().iter().map(|v| v * s).collect();
                self.accum(grads, *a, Tensor::from_parts(g.shape().to_vec(), d));
            }
            Op::AddBias(x, b) => {
                self.accum(grads, *x, g.clone());
                if self.needs(*b) {
                    let c = g.cols();
                    let mut db = vec![0.0; c];
                    for row in g.data().chunks(c) {
                        db.iter_mut().zip(row).for_each(|(d, v)| *d += v);
                    }
                    self.accum(grads, *b, Tensor::from_parts(val(*b).shape().to_vec(), db));
                }
            }
            Op::MulCol(x, w) => {
                let (tx, tw) = (val(*x), val(*w));
                let c = tx.cols();
                if self.needs(*x) {
                    let mut dx = g.data().to_vec();
                    for (row, &s) in dx.chunks_mut(c).zip(tw.data()) {
                        row.iter_mut().for_each(|v| *v *= s);
                    }
                    self.accum(grads, *x, Tensor::from_parts(tx.shape().to_vec(), dx));
                }
                if self.needs(*w) {
                    let dw = g
                        .data()
                        .chunks(c)
                        .zip(tx.data().chunks(c))
                        .map(|(gr, xr)| gr.iter().zip(xr).map(|(a, b)| a * b).sum())
                        .collect();
                    self.accum(grads, *w, Tensor::from_parts(tw.shape().to_vec(), dw));
                }
            }
            Op::MulRow(x, r) => {
                let (tx, tr) = (val(*x), val(*r));
                let c = tx.cols();
                if self.needs(*x) {
                    let mut dx = g.data().to_vec();
                    for row in dx.chunks_mut(c) {
                        row.iter_mut().zip(tr.data()).for_each(|(v, s)| *v *= s);
                    }
                    self.accum(grads, *x, Tensor::from_parts(tx.shape().to_vec(), dx));
                }
                if self.needs(*r) {
                    let mut dr = vec![0.0; c];
                    for (gr, xr) in g.data().chunks(c).zip(tx.data().chunks(c)) {
                        for j in 0..c {
                            dr[j] += gr[j] * xr[j];
                        }
                    }
                    self.accum(grads, *r, Tensor::from_parts(tr.shape().to_vec(), dr));
                }
            }
            Op::Silu(x) => {
                let d = g
                    .data()
                    .iter()
                    .zip(val(*x).data())
                    .map(|(gv, &xv)| {
                        let s = sigmoid(xv);
                        gv * (s + xv * s * (1.0 - s))
                    })
                    .collect();
                self.accum(grads, *x, Tensor::from_parts(g.shape().to_vec(), d));
            }
            Op::Sigmoid(x) => {
                let d = g
                    .data()
                    .iter()
                    .zip(out.data())
                    .map(|(gv, s)| gv * s * (1.0 - s))
                    .collect();
                self.accum(grads, *x, Tensor::from_parts(g.shape().to_vec(), d));
            }
            Op::SoftmaxRows(x) => {
                let c = out.cols();
                let mut d = vec![0.0; out.numel()];
                for ((dr, gr), yr) in d.chunks_mut(c).zip(g.data().chunks(c)).zip(out.data().chunks(c)) {
                    let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        dr[j] = yr[j] * (gr[j] - dot);
                    }
                }
                self.accum(grads, *x, Tensor::from_parts(out.shape().to_vec(), d));
            }
            Op::LogSoftmaxRows(x) => {
                let c = out.cols();
                let mut d = vec![0.0; out.numel()];
                for ((dr, gr), yr) in d.chunks_mut(c).zip(g.data().chunks(c)).zip(out.data().chunks(c)) {
                    let total: f64 = gr.iter().sum();
                    for j in 0..c {
                        dr[j] = gr[j] - yr[j].exp() * total;
                    }
                }
                self.accum(grads, *x, Tensor::from_parts(out.shape().to_vec(), d));
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let d = out.cols();
                let tg = val(*gain);
                if self.needs(*gain) || self.needs(*bias) {
                    let mut dg = vec![0.0; d];
                    let mut db = vec![0.0; d];
                    for (gr, hr) in g.data().chunks(d).zip(xhat.chunks(d)) {
                        for j in 0..d {
                            dg[j] += gr[j] * hr[j];
                            db[j] += gr[j];
                        }
                    }
                    self.accum(grads, *gain, Tensor::from_parts(tg.shape().to_vec(), dg));
                    self.accum(grads, *bias, Tensor::from_parts(val(*bias).shape().to_vec(), db));
                }
                if self.needs(*x) {
                    let mut dx = vec![0.0; out.numel()];
                    for (r, ((dr, gr), hr)) in dx
                        .chunks_mut(d)
                        .zip(g.data().chunks(d))
                        .zip(xhat.chunks(d))
                        .enumerate()
                    {
                        let dh: Vec<f64> = gr.iter().zip(tg.data()).map(|(a, b)| a * b).collect();
                        let mean_dh = dh.iter().sum::<f64>() / d as f64;
                        let mean_dh_h = dh.iter().zip(hr).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                        for j in 0..d {
                            dr[j] = rstd[r] * (dh[j] - mean_dh - hr[j] * mean_dh_h);
                        }
                    }
                    self.accum(grads, *x, Tensor::from_parts(out.shape().to_vec(), dx));
                }
            }
            Op::Transpose(x) => {
                let (r, c) = (g.shape()[0], g.shape()[1]);
                let mut d = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        d[j * r + i] = g.data()[i * c + j];
                    }
                }
                self.accum(grads, *x, Tensor::from_parts(vec![c, r], d));
            }
            Op::ConcatRows(xs) => {
                let c = g.cols();
                let mut offset = 0;
                for &x in xs {
                    let rows = val(x).rows();
                    if self.needs(x) {
                        let d = g.data()[offset * c..(offset + rows) * c].to_vec();
                        self.accum(grads, x, Tensor::from_parts(val(x).shape().to_vec(), d));
                    }
                    offset += rows;
                }
            }
            Op::ConcatCols(xs) => {
                let (rows, total) = (g.rows(), g.cols());
                let mut offset = 0;
                for &x in xs {
                    let c = val(x).cols();
                    if self.needs(x) {
                        let mut d = Vec::with_capacity(rows * c);
                        for r in 0..rows {
                            d.extend_from_slice(&g.data()[r * total + offset..r * total + offset + c]);
                        }
                        self.accum(grads, x, Tensor::from_parts(val(x).shape().to_vec(), d));
                    }
                    offset += c;
                }
            }
            Op::SliceRows(x, start) => {
                let tx = val(*x);
                let c = tx.cols();
                let mut d = vec![0.0; tx.numel()];
                d[start * c..start * c + g.numel()].copy_from_slice(g.data());
                self.accum(grads, *x, Tensor::from_parts(tx.shape().to_vec(), d));
            }
            Op::SliceCols(x, start) => {
                let tx = val(*x);
                let (c, w) = (tx.cols(), g.cols());
                let mut d = vec![0.0; tx.numel()];
                for r in 0..tx.rows() {
                    d[r * c + start..r * c + start + w].copy_from_slice(g.row(r));
                }
                self.accum(grads, *x, Tensor::from_parts(tx.shape().to_vec(), d));
            }
            Op::GatherRows(x, idx) => {
                let tx = val(*x);
                let c = tx.cols();
                let mut d = vec![0.0; tx.numel()];
                for (src, &dst) in idx.iter().enumerate() {
                    for (o, v) in d[dst * c..(dst + 1) * c].iter_mut().zip(g.row(src)) {
                        *o += v;
                    }
                }
                self.accum(grads, *x, Tensor::from_parts(tx.shape().to_vec(), d));
            }
            Op::ScatterRows(x, idx) => {
                let tx = val(*x);
                let mut d = Vec::with_capacity(tx.numel());
                for &dst in idx {
                    d.extend_from_slice(g.row(dst));
                }
                self.accum(grads, *x, Tensor::from_parts(tx.shape().to_vec(), d));
            }
            Op::GatherElements(x, at) => {
                let tx = val(*x);
                let c = tx.cols();
                let mut d = vec![0.0; tx.numel()];
                for (k, &(r, col)) in at.iter().enumerate() {
                    d[r * c + col] += g.data()[k];
                }
                self.accum(grads, *x, Tensor::from_parts(tx.shape().to_vec(), d));
            }
            Op::NormalizeRows(x) => {
                let tx = val(*x);
                let c = tx.cols();
                let mut d = vec![0.0; tx.numel()];
                for ((dr, gr), (yr, xr)) in d
                    .chunks_mut(c)
                    .zip(g.data().chunks(c))
                    .zip(out.data().chunks(c).zip(tx.data().chunks(c)))
                {
                    let s: f64 = xr.iter().sum();
                    let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        dr[j] = (gr[j] - dot) / s;
                    }
                }
                self.accum(grads, *x, Tensor::from_parts(tx.shape().to_vec(), d));
            }
            Op::Reshape(x) => {
                let d = g.data().to_vec();
                self.accum(grads, *x, Tensor::from_parts(val(*x).shape().to_vec(), d));
            }
            Op::Sum(x) => {
                let s = g.data()[0];
                self.accum(grads, *x, Tensor::full(val(*x).shape(), s));
            }
            Op::DepthwiseConv { x, kernel, bias } => {
                let (tx, tk) = (val(*x), val(*kernel));
                let (len, c) = (tx.rows(), tx.cols());
                let k = tk.shape()[1];
                let pad = k / 2;
                let mut dx = vec![0.0; tx.numel()];
                let mut dk = vec![0.0; tk.numel()];
                let mut db = vec![0.0; c];
                for t in 0..len {
                    for ch in 0..c {
                        let gv = g.data()[t * c + ch];
                        db[ch] += gv;
                        for j in 0..k {
                            let src = t + j;
                            if src < pad || src - pad >= len {
                                continue;
                            }
                            let xi = (src - pad) * c + ch;
                            dx[xi] += tk.data()[ch * k + j] * gv;
                            dk[ch * k + j] += tx.data()[xi] * gv;
                        }
                    }
                }
                self.accum(grads, *x, Tensor::from_parts(tx.shape().to_vec(), dx));
                self.accum(grads, *kernel, Tensor::from_parts(tk.shape().to_vec(), dk));
                self.accum(grads, *bias, Tensor::from_parts(val(*bias).shape().to_vec(), db));
            }
            Op::FixedGrad(x, local) => {
                let s = g.data()[0];
                let d = local.data().iter().map(|v| v * s).collect();
                self.accum(grads, *x, Tensor::from_parts(local.shape().to_vec(), d));
            }
        }
    }
}
