//! Dense `f64` tensors with a reverse-mode autodiff tape.
//!
//! The operation set is deliberately small: it covers the planner forward pass and the
//! imitation loss and nothing else. All kernels accumulate in a fixed order that depends only on
//! the row being computed, so evaluating a single node of a graph gives bit-identical results to
//! evaluating the whole batch.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::ShapeMismatch {
                op: "tensor",
                left: shape,
                right: vec![data.len()],
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("tensor construction".into()));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![],
            data: vec![value],
        }
    }

    /// Builds a `[rows.len(), cols]` matrix from equally sized rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if let Some(bad) = rows.iter().find(|r| r.len() != cols) {
            return Err(Error::ShapeMismatch {
                op: "from_rows",
                left: vec![cols],
                right: vec![bad.len()],
            });
        }
        Self::new(vec![rows.len(), cols], rows.concat())
    }

    /// Unchecked constructor for kernel outputs whose shape is correct by construction.
    fn raw(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rows(&self) -> usize {
        self.shape.first().copied().unwrap_or(1)
    }

    /// Size of the last axis (1 for scalars).
    pub fn cols(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.data.len() / self.rows().max(1);
        &self.data[r * c..(r + 1) * c]
    }

    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn reshaped(&self, shape: &[usize]) -> Result<Self> {
        Self::new(shape.to_vec(), self.data.clone())
    }
}

/// `out += a · b` for row-major `a: [m, k]`, `b: [k, n]`.
///
/// Each output element sums over `k` in ascending order starting from the existing value.
/// Runtime dispatch only widens the vectors; the operation order, and so the result, is identical.
pub fn gemm_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    #[cfg(target_arch = "x86_64")]
    {
        if std::is_x86_feature_detected!("avx2") {
            // SAFETY: the feature was detected at runtime.
            unsafe { gemm_avx2(a, b, out, m, k, n) };
            return;
        }
    }
    gemm_generic(a, b, out, m, k, n);
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn gemm_avx2(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    gemm_generic(a, b, out, m, k, n);
}

#[inline(always)]
fn gemm_generic(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    const MR: usize = 4;
    const NR: usize = 8;
    let mut i = 0;
    while i + MR <= m {
        let mut j = 0;
        while j + NR <= n {
            let mut acc = [[0.0; NR]; MR];
            for (r, row) in acc.iter_mut().enumerate() {
                row.copy_from_slice(&out[(i + r) * n + j..(i + r) * n + j + NR]);
            }
            for kk in 0..k {
                let bv: &[f64; NR] = b[kk * n + j..kk * n + j + NR].try_into().expect("tile width");
                for (r, row) in acc.iter_mut().enumerate() {
                    let av = a[(i + r) * k + kk];
                    for c in 0..NR {
                        row[c] += av * bv[c];
                    }
                }
            }
            for (r, row) in acc.iter().enumerate() {
                out[(i + r) * n + j..(i + r) * n + j + NR].copy_from_slice(row);
            }
            j += NR;
        }
        if j < n {
            for r in i..i + MR {
                gemm_row(&a[r * k..(r + 1) * k], b, &mut out[r * n + j..(r + 1) * n], j, n);
            }
        }
        i += MR;
    }
    for r in i..m {
        gemm_row(&a[r * k..(r + 1) * k], b, &mut out[r * n..(r + 1) * n], 0, n);
    }
}

/// `orow += arow · b[:, from..n]`, summing over `k` in ascending order.
#[inline(always)]
fn gemm_row(arow: &[f64], b: &[f64], orow: &mut [f64], from: usize, n: usize) {
    for (kk, &av) in arow.iter().enumerate() {
        let brow = &b[kk * n + from..(kk + 1) * n];
        for (o, &bv) in orow.iter_mut().zip(brow) {
            *o += av * bv;
        }
    }
}

fn transpose(data: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = data[r * cols + c];
        }
    }
    out
}

/// Splits a shape around `axis` into (outer, len, inner) strides.
fn axis_split(shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(Error::InvalidArgument(format!("axis {axis} out of range for shape {shape:?}")));
    }
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    Ok((outer, shape[axis], inner))
}

fn reduced_shape(shape: &[usize], axis: usize) -> Vec<usize> {
    let mut s = shape.to_vec();
    s.remove(axis);
    s
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Param,
    MatMul(Var, Var),
    Add(Var, Var),
    AddBroadcast(Var, Var),
    MulScalar(Var, f64),
    Concat(Vec<Var>),
    Exp(Var),
    Tanh(Var),
    LeakyRelu(Var, f64),
    Softmax(Var, usize),
    ReduceMax(Var, usize, Vec<usize>),
    ReduceSum(Var, usize),
    SumAll(Var),
    Mse { pred: Var, target: Var, weights: Vec<f64>, scale: f64 },
    Gather(Var, Vec<usize>),
    Reshape(Var),
    SliceRows(Var, usize),
    WeightedRows(Var, Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    /// Whether any parameter feeds this node.
    needs_grad: bool,
}

/// Records operations for reverse-mode differentiation.
///
/// Nodes are appended in evaluation order, so the node list is already topologically sorted.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: Vec<Var>,
}

/// Gradients of a scalar with respect to each registered parameter, in registration order.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub params: Vec<Tensor>,
}

impl Gradients {
    pub fn global_norm(&self) -> f64 {
        self.params.iter().map(|g| g.data.iter().map(|v| v * v).sum::<f64>()).sum::<f64>().sqrt()
    }
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
        let needs_grad = match &op {
            Op::Leaf => false,
            Op::Param => true,
            Op::MatMul(a, b) | Op::Add(a, b) | Op::AddBroadcast(a, b) | Op::WeightedRows(a, b) => {
                self.nodes[a.0].needs_grad || self.nodes[b.0].needs_grad
            }
            Op::Mse { pred, target, .. } => self.nodes[pred.0].needs_grad || self.nodes[target.0].needs_grad,
            Op::Concat(parts) => parts.iter().any(|p| self.nodes[p.0].needs_grad),
            Op::MulScalar(a, _)
            | Op::Exp(a)
            | Op::Tanh(a)
            | Op::LeakyRelu(a, _)
            | Op::Softmax(a, _)
            | Op::ReduceMax(a, _, _)
            | Op::ReduceSum(a, _)
            | Op::SumAll(a)
            | Op::Gather(a, _)
            | Op::Reshape(a)
            | Op::SliceRows(a, _) => self.nodes[a.0].needs_grad,
        };
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].value.shape
    }

    /// A constant input; receives no gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf)
    }

    /// A trainable input whose gradient is reported by [`Tape::backward`].
    pub fn param(&mut self, t: Tensor) -> Var {
        let v = self.push(t, Op::Param);
        self.params.push(v);
        v
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                left: sa.to_vec(),
                right: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm_acc(&self.value(a).data, &self.value(b).data, &mut out, m, k, n);
        Ok(self.push(Tensor::raw(vec![m, n], out), Op::MatMul(a, b)))
    }

    /// Elementwise sum. `b` may also have the shape of `a`'s trailing axes (bias broadcast).
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa == sb {
            let data = self.value(a).data.iter().zip(&self.value(b).data).map(|(x, y)| x + y).collect();
            return Ok(self.push(Tensor::raw(sa, data), Op::Add(a, b)));
        }
        if sb.len() < sa.len() && sa[sa.len() - sb.len()..] == sb[..] {
            let inner = self.value(b).len();
            let bd = &self.value(b).data;
            let data = self.value(a).data.iter().enumerate().map(|(i, x)| x + bd[i % inner]).collect();
            return Ok(self.push(Tensor::raw(sa, data), Op::AddBroadcast(a, b)));
        }
        Err(Error::ShapeMismatch {
            op: "add",
            left: sa,
            right: sb,
        })
    }

    pub fn mul_scalar(&mut self, a: Var, s: f64) -> Var {
        let t = self.value(a);
        let data = t.data.iter().map(|x| x * s).collect();
        let shape = t.shape.clone();
        self.push(Tensor::raw(shape, data), Op::MulScalar(a, s))
    }

    /// Concatenates along the last axis; all leading axes must agree.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::InvalidArgument("concat of zero tensors".into()))?;
        let lead = self.shape(*first)[..self.shape(*first).len().saturating_sub(1)].to_vec();
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.is_empty() || s[..s.len() - 1] != lead[..] {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    left: self.shape(*first).to_vec(),
                    right: s.to_vec(),
                });
            }
            total += s[s.len() - 1];
        }
        let rows: usize = lead.iter().product();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                let t = self.value(p);
                let c = t.cols();
                data.extend_from_slice(&t.data[r * c..(r + 1) * c]);
            }
        }
        let mut shape = lead;
        shape.push(total);
        Ok(self.push(Tensor::raw(shape, data), Op::Concat(parts.to_vec())))
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let t = self.value(a);
        let data = t.data.iter().map(|&x| f(x)).collect();
        let shape = t.shape.clone();
        self.push(Tensor::raw(shape, data), op)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let v = self.unary(a, f64::exp, Op::Exp(a));
        if !self.value(v).is_finite() {
            return Err(Error::NonFinite("exp".into()));
        }
        Ok(v)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, f64::tanh, Op::Tanh(a))
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        self.unary(a, |x| if x > 0.0 { x } else { slope * x }, Op::LeakyRelu(a, slope))
    }

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let t = self.value(a);
        let (outer, len, inner) = axis_split(&t.shape, axis)?;
        let mut out = vec![0.0; t.data.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |j: usize| (o * len + j) * inner + i;
                let mut max = f64::NEG_INFINITY;
                for j in 0..len {
                    max = max.max(t.data[idx(j)]);
                }
                let mut sum = 0.0;
                for j in 0..len {
                    let e = (t.data[idx(j)] - max).exp();
                    out[idx(j)] = e;
                    sum += e;
                }
                for j in 0..len {
                    out[idx(j)] /= sum;
                }
            }
        }
        let shape = t.shape.clone();
        Ok(self.push(Tensor::raw(shape, out), Op::Softmax(a, axis)))
    }

    /// Maximum along `axis`; the subgradient goes to the lowest-index maximizer.
    pub fn reduce_max(&mut self, a: Var, axis: usize) -> Result<Var> {
        let t = self.value(a);
        let (outer, len, inner) = axis_split(&t.shape, axis)?;
        if len == 0 {
            return Err(Error::InvalidArgument("reduce_max over an empty axis".into()));
        }
        let mut out = vec![0.0; outer * inner];
        let mut arg = vec![0usize; outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let mut best = 0;
                let mut best_v = t.data[o * len * inner + i];
                for j in 1..len {
                    let v = t.data[(o * len + j) * inner + i];
                    if v > best_v {
                        best = j;
                        best_v = v;
                    }
                }
                out[o * inner + i] = best_v;
                arg[o * inner + i] = best;
            }
        }
        let shape = reduced_shape(&t.shape, axis);
        Ok(self.push(Tensor::raw(shape, out), Op::ReduceMax(a, axis, arg)))
    }

    pub fn reduce_sum(&mut self, a: Var, axis: usize) -> Result<Var> {
        let t = self.value(a);
        let (outer, len, inner) = axis_split(&t.shape, axis)?;
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for j in 0..len {
                for i in 0..inner {
                    out[o * inner + i] += t.data[(o * len + j) * inner + i];
                }
            }
        }
        let shape = reduced_shape(&t.shape, axis);
        Ok(self.push(Tensor::raw(shape, out), Op::ReduceSum(a, axis)))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = self.value(a).data.iter().sum();
        self.push(Tensor::scalar(s), Op::SumAll(a))
    }

    /// `scale · Σ_r w_r ‖pred_r − target_r‖²` over rows (last axis is the vector axis).
    /// The weights are constants.
    pub fn mse(&mut self, pred: Var, target: Var, weights: &[f64], scale: f64) -> Result<Var> {
        let (p, t) = (self.value(pred), self.value(target));
        if p.shape != t.shape {
            return Err(Error::ShapeMismatch {
                op: "mse",
                left: p.shape.clone(),
                right: t.shape.clone(),
            });
        }
        let cols = p.cols();
        let rows = p.len() / cols.max(1);
        if weights.len() != rows {
            return Err(Error::ShapeMismatch {
                op: "mse weights",
                left: vec![rows],
                right: vec![weights.len()],
            });
        }
        let mut total = 0.0;
        for r in 0..rows {
            let mut sq = 0.0;
            for c in 0..cols {
                let d = p.data[r * cols + c] - t.data[r * cols + c];
                sq += d * d;
            }
            total += weights[r] * sq;
        }
        Ok(self.push(
            Tensor::scalar(scale * total),
            Op::Mse {
                pred,
                target,
                weights: weights.to_vec(),
                scale,
            },
        ))
    }

    /// Selects rows (first-axis slices) by index; indices may repeat.
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let t = self.value(a);
        let rows = t.rows();
        let c = t.len() / rows.max(1);
        let mut data = Vec::with_capacity(idx.len() * c);
        for &r in idx {
            if r >= rows {
                return Err(Error::IndexOutOfRange { index: r, len: rows });
            }
            data.extend_from_slice(&t.data[r * c..(r + 1) * c]);
        }
        let mut shape = t.shape.clone();
        if shape.is_empty() {
            return Err(Error::InvalidArgument("gather_rows on a scalar".into()));
        }
        shape[0] = idx.len();
        Ok(self.push(Tensor::raw(shape, data), Op::Gather(a, idx.to_vec())))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).reshaped(shape)?;
        Ok(self.push(t, Op::Reshape(a)))
    }

    /// Rows `start..end` of the first axis.
    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let t = self.value(a);
        let rows = t.rows();
        if start > end || end > rows || t.shape.is_empty() {
            return Err(Error::InvalidArgument(format!("row slice {start}..{end} of shape {:?}", t.shape)));
        }
        let c = t.len() / rows.max(1);
        let data = t.data[start * c..end * c].to_vec();
        let mut shape = t.shape.clone();
        shape[0] = end - start;
        Ok(self.push(Tensor::raw(shape, data), Op::SliceRows(a, start)))
    }

    /// `out[q] = Σ_j weights[q, j] · rows[q·m + j]` for `weights: [Q, m]`, `rows: [Q·m, C]`,
    /// summed in increasing `j`.
    pub fn weighted_rows(&mut self, weights: Var, rows: Var) -> Result<Var> {
        let (w, r) = (self.value(weights), self.value(rows));
        if w.shape.len() != 2 || r.shape.len() != 2 || w.shape[0] * w.shape[1] != r.shape[0] {
            return Err(Error::ShapeMismatch {
                op: "weighted_rows",
                left: w.shape.clone(),
                right: r.shape.clone(),
            });
        }
        let (q, m, c) = (w.shape[0], w.shape[1], r.shape[1]);
        let mut out = vec![0.0; q * c];
        for qi in 0..q {
            let orow = &mut out[qi * c..(qi + 1) * c];
            for j in 0..m {
                let wv = w.data[qi * m + j];
                let src = &r.data[(qi * m + j) * c..(qi * m + j + 1) * c];
                for (o, &s) in orow.iter_mut().zip(src) {
                    *o += wv * s;
                }
            }
        }
        Ok(self.push(Tensor::raw(vec![q, c], out), Op::WeightedRows(weights, rows)))
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::InvalidArgument(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::filled(self.shape(loss), 1.0));
        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        let params = self
            .params
            .iter()
            .map(|p| match grads.get(p.0).cloned().flatten() {
                Some(g) => g,
                None => Tensor::zeros(self.shape(*p)),
            })
            .collect();
        Ok(Gradients { params })
    }

    fn propagate(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[idx];
        let out = &node.value;
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.shape[0], ta.shape[1], tb.shape[1]);
                if self.nodes[a.0].needs_grad {
                    let bt = transpose(&tb.data, k, n);
                    let mut da = vec![0.0; m * k];
                    gemm_acc(&g.data, &bt, &mut da, m, n, k);
                    accumulate(grads, *a, Tensor::raw(vec![m, k], da));
                }
                if self.nodes[b.0].needs_grad {
                    let at = transpose(&ta.data, m, k);
                    let mut db = vec![0.0; k * n];
                    gemm_acc(&at, &g.data, &mut db, k, m, n);
                    accumulate(grads, *b, Tensor::raw(vec![k, n], db));
                }
            }
            Op::Add(a, b) => {
                accumulate(grads, *a, g.clone());
                accumulate(grads, *b, g.clone());
            }
            Op::AddBroadcast(a, b) => {
                let tb = self.value(*b);
                let inner = tb.len();
                let mut db = vec![0.0; inner];
                for (i, v) in g.data.iter().enumerate() {
                    db[i % inner] += v;
                }
                accumulate(grads, *a, g.clone());
                accumulate(grads, *b, Tensor::raw(tb.shape.clone(), db));
            }
            Op::MulScalar(a, s) => {
                accumulate(grads, *a, map(g, |v| v * s));
            }
            Op::Concat(parts) => {
                let total = out.cols();
                let rows = out.len() / total.max(1);
                let mut offset = 0;
                for &p in parts {
                    let tp = self.value(p);
                    let c = tp.cols();
                    let mut d = Vec::with_capacity(tp.len());
                    for r in 0..rows {
                        d.extend_from_slice(&g.data[r * total + offset..r * total + offset + c]);
                    }
                    offset += c;
                    accumulate(grads, p, Tensor::raw(tp.shape.clone(), d));
                }
            }
            Op::Exp(a) => {
                let d = g.data.iter().zip(&out.data).map(|(gv, y)| gv * y).collect();
                accumulate(grads, *a, Tensor::raw(out.shape.clone(), d));
            }
            Op::Tanh(a) => {
                let d = g.data.iter().zip(&out.data).map(|(gv, y)| gv * (1.0 - y * y)).collect();
                accumulate(grads, *a, Tensor::raw(out.shape.clone(), d));
            }
            Op::LeakyRelu(a, slope) => {
                let x = self.value(*a);
                let d = g
                    .data
                    .iter()
                    .zip(&x.data)
                    .map(|(gv, &xv)| if xv > 0.0 { *gv } else { gv * slope })
                    .collect();
                accumulate(grads, *a, Tensor::raw(out.shape.clone(), d));
            }
            Op::Softmax(a, axis) => {
                let (outer, len, inner) = axis_split(&out.shape, *axis).expect("validated in forward");
                let mut d = vec![0.0; out.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |j: usize| (o * len + j) * inner + i;
                        let dot: f64 = (0..len).map(|j| g.data[idx(j)] * out.data[idx(j)]).sum();
                        for j in 0..len {
                            d[idx(j)] = out.data[idx(j)] * (g.data[idx(j)] - dot);
                        }
                    }
                }
                accumulate(grads, *a, Tensor::raw(out.shape.clone(), d));
            }
            Op::ReduceMax(a, axis, arg) => {
                let ta = self.value(*a);
                let (outer, len, inner) = axis_split(&ta.shape, *axis).expect("validated in forward");
                let mut d = vec![0.0; ta.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let j = arg[o * inner + i];
                        d[(o * len + j) * inner + i] += g.data[o * inner + i];
                    }
                }
                accumulate(grads, *a, Tensor::raw(ta.shape.clone(), d));
            }
            Op::ReduceSum(a, axis) => {
                let ta = self.value(*a);
                let (outer, len, inner) = axis_split(&ta.shape, *axis).expect("validated in forward");
                let mut d = vec![0.0; ta.len()];
                for o in 0..outer {
                    for j in 0..len {
                        for i in 0..inner {
                            d[(o * len + j) * inner + i] = g.data[o * inner + i];
                        }
                    }
                }
                accumulate(grads, *a, Tensor::raw(ta.shape.clone(), d));
            }
            Op::SumAll(a) => {
                let ta = self.value(*a);
                accumulate(grads, *a, Tensor::filled(&ta.shape, g.data[0]));
            }
            Op::Mse {
                pred,
                target,
                weights,
                scale,
            } => {
                let (p, t) = (self.value(*pred), self.value(*target));
                let cols = p.cols();
                let gs = g.data[0] * scale;
                let dp: Vec<f64> = p
                    .data
                    .iter()
                    .zip(&t.data)
                    .enumerate()
                    .map(|(i, (pv, tv))| 2.0 * gs * weights[i / cols] * (pv - tv))
                    .collect();
                let dt = dp.iter().map(|v| -v).collect();
                accumulate(grads, *pred, Tensor::raw(p.shape.clone(), dp));
                accumulate(grads, *target, Tensor::raw(t.shape.clone(), dt));
            }
            Op::Gather(a, idx) => {
                let ta = self.value(*a);
                let c = ta.len() / ta.rows().max(1);
                let mut d = vec![0.0; ta.len()];
                for (k, &r) in idx.iter().enumerate() {
                    for (dv, gv) in d[r * c..(r + 1) * c].iter_mut().zip(&g.data[k * c..(k + 1) * c]) {
                        *dv += gv;
                    }
                }
                accumulate(grads, *a, Tensor::raw(ta.shape.clone(), d));
            }
            Op::Reshape(a) => {
                let ta = self.value(*a);
                accumulate(grads, *a, Tensor::raw(ta.shape.clone(), g.data.clone()));
            }
            Op::SliceRows(a, start) => {
                let ta = self.value(*a);
                let c = ta.len() / ta.rows().max(1);
                let mut d = vec![0.0; ta.len()];
                d[start * c..start * c + g.len()].copy_from_slice(&g.data);
                accumulate(grads, *a, Tensor::raw(ta.shape.clone(), d));
            }
            Op::WeightedRows(w, r) => {
                let (tw, tr) = (self.value(*w), self.value(*r));
                let (q, m, c) = (tw.shape[0], tw.shape[1], tr.shape[1]);
                let mut dw = vec![0.0; q * m];
                let mut dr = vec![0.0; tr.len()];
                for qi in 0..q {
                    let grow = &g.data[qi * c..(qi + 1) * c];
                    for j in 0..m {
                        let row = qi * m + j;
                        let src = &tr.data[row * c..(row + 1) * c];
                        dw[row] = grow.iter().zip(src).map(|(a, b)| a * b).sum();
                        let wv = tw.data[row];
                        for (dv, gv) in dr[row * c..(row + 1) * c].iter_mut().zip(grow) {
                            *dv += wv * gv;
                        }
                    }
                }
                accumulate(grads, *w, Tensor::raw(tw.shape.clone(), dw));
                accumulate(grads, *r, Tensor::raw(tr.shape.clone(), dr));
            }
        }
    }
}

fn map(t: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor::raw(t.shape.clone(), t.data.iter().map(|&v| f(v)).collect())
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(existing) => {
            for (a, b) in existing.data.iter_mut().zip(&g.data) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone)]
pub struct AdamState {
    pub step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(params: &[Tensor]) -> Self {
        Self {
            step: 0,
            first: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            second: params.iter().map(|p| vec![0.0; p.len()]).collect(),
        }
    }
}

/// One bias-corrected Adam update applied in place.
pub fn adam_step(params: &mut [Tensor], grads: &[Tensor], state: &mut AdamState, lr: f64, cfg: &AdamConfig) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.first.len() {
        return Err(Error::ShapeMismatch {
            op: "adam_step",
            left: vec![params.len()],
            right: vec![grads.len()],
        });
    }
    for (p, g) in params.iter().zip(grads) {
        if p.shape != g.shape {
            return Err(Error::ShapeMismatch {
                op: "adam_step",
                left: p.shape.clone(),
                right: g.shape.clone(),
            });
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for (k, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let (m, v) = (&mut state.first[k], &mut state.second[k]);
        for i in 0..p.data.len() {
            let gi = g.data[i];
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * gi;
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * gi * gi;
            let mhat = m[i] / c1;
            let vhat = v[i] / c2;
            p.data[i] -= lr * mhat / (vhat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}
