//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Graph`] is a tape: every op appends a node holding its forward value
//! and enough saved state to run its adjoint. Node indices are handed out as
//! [`Var`] handles, so creation order is a valid topological order and
//! [`Graph::backward`] simply walks the tape in reverse.
//!
//! Parameters live outside the graph. A training step creates a fresh graph,
//! binds the parameters as leaves with [`Graph::param`], builds the loss,
//! calls [`Graph::backward`] and reads the leaf gradients back with
//! [`Graph::grad`].

use crate::error::{Result, TensorError};
use crate::tensor::Tensor;

/// Floor applied to the argument of [`Graph::log`].
pub const LOG_FLOOR: f64 = 1e-12;

/// Variance epsilon used by [`Graph::batch_norm`].
pub const BATCH_NORM_EPS: f64 = 1e-5;

const NORM_FLOOR: f64 = 1e-12;

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    MatMul(Var, Var),
    Affine(Var, Var, Var),
    Bmm(Var, Var),
    Relu(Var),
    Tanh(Var),
    Exp(Var),
    Log(Var),
    Softplus(Var),
    Softmax(Var),
    LogSoftmax(Var),
    BatchNorm { x: Var, inv_std: Vec<f64> },
    RowNormalize { x: Var, norms: Vec<f64> },
    SumAll(Var),
    MeanAll(Var),
    SumAxis { x: Var, axis: usize },
    GatherRows { x: Var, idx: Vec<usize> },
    PickCols { x: Var, cols: Vec<usize> },
    Concat { inputs: Vec<Var>, axis: usize },
    Reshape(Var),
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
}

/// Counters for numerical guards that fired during forward evaluation.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Numerics {
    pub log_floor_hits: usize,
}

/// Computation tape.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
    numerics: Numerics,
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

fn invalid(op: &'static str, t: &Tensor, msg: impl Into<String>) -> TensorError {
    TensorError::InvalidShape {
        op,
        shape: t.shape().to_vec(),
        msg: msg.into(),
    }
}

/// Numpy-style broadcast of two shapes.
fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i < rank - a.len() { 1 } else { a[i - (rank - a.len())] };
        let db = if i < rank - b.len() { 1 } else { b[i - (rank - b.len())] };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// For every element of `out`, the linear offset of the broadcast source
/// element in a tensor of shape `src`.
fn broadcast_offsets(out: &[usize], src: &[usize]) -> Vec<usize> {
    let n: usize = out.iter().product();
    if out == src {
        return (0..n).collect();
    }
    let rank = out.len();
    let pad = rank - src.len();
    let mut strides = vec![0usize; rank];
    let mut acc = 1;
    for i in (0..src.len()).rev() {
        strides[i + pad] = if src[i] == 1 { 0 } else { acc };
        acc *= src[i];
    }
    let mut idx = vec![0usize; rank];
    let mut offsets = Vec::with_capacity(n);
    let mut off = 0usize;
    for _ in 0..n {
        offsets.push(off);
        for d in (0..rank).rev() {
            idx[d] += 1;
            off += strides[d];
            if idx[d] < out[d] {
                break;
            }
            off -= strides[d] * out[d];
            idx[d] = 0;
        }
    }
    offsets
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// out (m,n) += a (m,k) · bᵀ where b is (n,k)
fn matmul_bt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            out[i * n + j] += arow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
        }
    }
}

/// out (k,n) += aᵀ · b where a is (m,k), b is (m,n)
fn matmul_at(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

fn softmax_rows(x: &Tensor) -> Tensor {
    let w = x.last_dim();
    let mut out = x.clone();
    for row in out.data_mut().chunks_mut(w.max(1)) {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            s += *v;
        }
        for v in row.iter_mut() {
            *v /= s;
        }
    }
    out
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

    pub fn numerics(&self) -> Numerics {
        self.numerics
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    /// Adds a leaf. Gradients are tracked only when `requires_grad` is set.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last backward root with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    // ---- elementwise binary (broadcasting) ----

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let shape = broadcast_shape(ta.shape(), tb.shape()).ok_or_else(|| shape_err(name, ta, tb))?;
        let value = if ta.shape() == tb.shape() {
            let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
            Tensor::new(shape, data)?
        } else {
            let oa = broadcast_offsets(&shape, ta.shape());
            let ob = broadcast_offsets(&shape, tb.shape());
            let (da, db) = (ta.data(), tb.data());
            let data = oa.iter().zip(&ob).map(|(&i, &j)| f(da[i], db[j])).collect();
            Tensor::new(shape, data)?
        };
        Ok(self.push(value, op, &[a, b]))
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

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).map(|x| x * c);
        self.push(v, Op::Scale(a, c), &[a])
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).map(|x| x + c);
        self.push(v, Op::AddScalar(a), &[a])
    }

    // ---- linear algebra ----

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.rank() != 2 || tb.rank() != 2 || ta.shape()[1] != tb.shape()[0] {
            return Err(shape_err("matmul", ta, tb));
        }
        let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
        let mut out = vec![0.0; m * n];
        matmul_raw(ta.data(), tb.data(), m, k, n, &mut out);
        let value = Tensor::new([m, n], out)?;
        Ok(self.push(value, Op::MatMul(a, b), &[a, b]))
    }

    /// `x · w + b` with `x: (m, k)`, `w: (k, n)`, `b: (n)`.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (tx, tw, tb) = (self.value(x), self.value(w), self.value(b));
        if tx.rank() != 2 || tw.rank() != 2 || tx.shape()[1] != tw.shape()[0] {
            return Err(shape_err("affine", tx, tw));
        }
        let (m, k, n) = (tx.shape()[0], tx.shape()[1], tw.shape()[1]);
        if tb.numel() != n {
            return Err(shape_err("affine", tw, tb));
        }
        let mut out = Vec::with_capacity(m * n);
        for _ in 0..m {
            out.extend_from_slice(tb.data());
        }
        matmul_raw(tx.data(), tw.data(), m, k, n, &mut out);
        let value = Tensor::new([m, n], out)?;
        Ok(self.push(value, Op::Affine(x, w, b), &[x, w, b]))
    }

    /// Batched matmul `(N, n, p) · (N, p, q) -> (N, n, q)`.
    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.rank() != 3 || tb.rank() != 3 || ta.shape()[0] != tb.shape()[0] || ta.shape()[2] != tb.shape()[1] {
            return Err(shape_err("bmm", ta, tb));
        }
        let (bn, n, p, q) = (ta.shape()[0], ta.shape()[1], ta.shape()[2], tb.shape()[2]);
        let mut out = vec![0.0; bn * n * q];
        for i in 0..bn {
            matmul_raw(
                &ta.data()[i * n * p..(i + 1) * n * p],
                &tb.data()[i * p * q..(i + 1) * p * q],
                n,
                p,
                q,
                &mut out[i * n * q..(i + 1) * n * q],
            );
        }
        let value = Tensor::new([bn, n, q], out)?;
        Ok(self.push(value, Op::Bmm(a, b), &[a, b]))
    }

    // ---- elementwise unary ----

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.max(0.0));
        self.push(v, Op::Relu(a), &[a])
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::tanh);
        self.push(v, Op::Tanh(a), &[a])
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::exp);
        self.push(v, Op::Exp(a), &[a])
    }

    /// Natural log with the argument floored at [`LOG_FLOOR`]; floored
    /// elements are counted in [`Numerics::log_floor_hits`] and pass no gradient.
    pub fn log(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let hits = t.data().iter().filter(|&&x| !(x > LOG_FLOOR)).count();
        let v = t.map(|x| x.max(LOG_FLOOR).ln());
        self.numerics.log_floor_hits += hits;
        self.push(v, Op::Log(a), &[a])
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let v = self.value(a).map(softplus);
        self.push(v, Op::Softplus(a), &[a])
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Var {
        let v = softmax_rows(self.value(a));
        self.push(v, Op::Softmax(a), &[a])
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let w = t.last_dim();
        let mut out = t.clone();
        for row in out.data_mut().chunks_mut(w.max(1)) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            for v in row.iter_mut() {
                *v -= lse;
            }
        }
        self.push(out, Op::LogSoftmax(a), &[a])
    }

    /// Column-wise standardization of a `(N, F)` matrix with batch statistics.
    pub fn batch_norm(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.rank() != 2 || t.shape()[0] == 0 {
            return Err(invalid("batch_norm", t, "expected a non-empty (N, F) matrix"));
        }
        let (n, f) = (t.shape()[0], t.shape()[1]);
        let d = t.data();
        let mut out = vec![0.0; n * f];
        let mut inv_std = vec![0.0; f];
        for j in 0..f {
            let mean = (0..n).map(|i| d[i * f + j]).sum::<f64>() / n as f64;
            let var = (0..n).map(|i| (d[i * f + j] - mean).powi(2)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + BATCH_NORM_EPS).sqrt();
            inv_std[j] = is;
            for i in 0..n {
                out[i * f + j] = (d[i * f + j] - mean) * is;
            }
        }
        let value = Tensor::new([n, f], out)?;
        Ok(self.push(value, Op::BatchNorm { x, inv_std }, &[x]))
    }

    /// Divides each row (last axis) by its L2 norm.
    pub fn row_normalize(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let w = t.last_dim().max(1);
        let mut out = t.clone();
        let mut norms = Vec::with_capacity(t.rows());
        for row in out.data_mut().chunks_mut(w) {
            let nrm = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(NORM_FLOOR);
            for v in row.iter_mut() {
                *v /= nrm;
            }
            norms.push(nrm);
        }
        self.push(out, Op::RowNormalize { x, norms }, &[x])
    }

    // ---- reductions and indexing ----

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::SumAll(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let s = t.data().iter().sum::<f64>() / t.numel().max(1) as f64;
        self.push(Tensor::scalar(s), Op::MeanAll(a), &[a])
    }

    /// Sums over `axis`, removing it from the shape.
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let t = self.value(a);
        if axis >= t.rank() {
            return Err(invalid("sum_axis", t, format!("axis {axis} out of range")));
        }
        let shape = t.shape();
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let mut out = vec![0.0; outer * inner];
        let d = t.data();
        for o in 0..outer {
            for l in 0..len {
                let src = &d[(o * len + l) * inner..(o * len + l + 1) * inner];
                for (acc, v) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *acc += v;
                }
            }
        }
        let mut new_shape = shape.to_vec();
        new_shape.remove(axis);
        let value = Tensor::new(new_shape, out)?;
        Ok(self.push(value, Op::SumAxis { x: a, axis }, &[a]))
    }

    /// Selects rows along the leading axis; indices may repeat.
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let t = self.value(x);
        if t.rank() == 0 {
            return Err(invalid("gather_rows", t, "cannot gather from a scalar"));
        }
        let rows = t.shape()[0];
        let width = t.numel() / rows.max(1);
        let mut out = Vec::with_capacity(idx.len() * width);
        for &i in idx {
            if i >= rows {
                return Err(TensorError::IndexOutOfRange {
                    op: "gather_rows",
                    index: i,
                    extent: rows,
                });
            }
            out.extend_from_slice(&t.data()[i * width..(i + 1) * width]);
        }
        let mut shape = t.shape().to_vec();
        shape[0] = idx.len();
        let value = Tensor::new(shape, out)?;
        Ok(self.push(value, Op::GatherRows { x, idx: idx.to_vec() }, &[x]))
    }

    /// Picks one column per row of an `(N, C)` matrix, giving `(N)`.
    pub fn pick_cols(&mut self, x: Var, cols: &[usize]) -> Result<Var> {
        let t = self.value(x);
        if t.rank() != 2 || t.shape()[0] != cols.len() {
            return Err(invalid("pick_cols", t, format!("expected {} rows", cols.len())));
        }
        let c = t.shape()[1];
        let mut out = Vec::with_capacity(cols.len());
        for (i, &j) in cols.iter().enumerate() {
            if j >= c {
                return Err(TensorError::IndexOutOfRange {
                    op: "pick_cols",
                    index: j,
                    extent: c,
                });
            }
            out.push(t.data()[i * c + j]);
        }
        let value = Tensor::new([cols.len()], out)?;
        Ok(self.push(value, Op::PickCols { x, cols: cols.to_vec() }, &[x]))
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs
            .first()
            .map(|&v| self.value(v).clone())
            .ok_or_else(|| invalid("concat", &Tensor::zeros([0]), "no inputs"))?;
        if axis >= first.rank() {
            return Err(invalid("concat", &first, format!("axis {axis} out of range")));
        }
        let outer: usize = first.shape()[..axis].iter().product();
        let inner: usize = first.shape()[axis + 1..].iter().product();
        let mut total = 0;
        for &v in inputs {
            let t = self.value(v);
            let ok = t.rank() == first.rank()
                && t.shape()[..axis] == first.shape()[..axis]
                && t.shape()[axis + 1..] == first.shape()[axis + 1..];
            if !ok {
                return Err(shape_err("concat", &first, t));
            }
            total += t.shape()[axis];
        }
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let t = self.value(v);
                let chunk = t.shape()[axis] * inner;
                out.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = first.shape().to_vec();
        shape[axis] = total;
        let value = Tensor::new(shape, out)?;
        Ok(self.push(
            value,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            inputs,
        ))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).reshape(shape.to_vec())?;
        Ok(self.push(value, Op::Reshape(a), &[a]))
    }

    // ---- backward ----

    /// Runs reverse accumulation from a one-element root. Gradients from a
    /// previous call are discarded.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        let rv = &self.nodes[root.0].value;
        if rv.numel() != 1 {
            return Err(TensorError::NonScalarRoot(rv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(Tensor::full(rv.shape().to_vec(), 1.0));
        for i in (0..=root.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        for (i, g) in grads.iter_mut().enumerate() {
            if !self.nodes[i].requires_grad {
                *g = None;
            }
        }
        self.grads = grads;
        Ok(())
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, delta: Tensor) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(g) => {
                for (a, b) in g.data_mut().iter_mut().zip(delta.data()) {
                    *a += b;
                }
            }
            slot @ None => *slot = Some(delta),
        }
    }

    /// Reduces a broadcast output gradient back to the source shape.
    fn unbroadcast(&self, g: &Tensor, src: Var) -> Tensor {
        let shape = self.nodes[src.0].value.shape().to_vec();
        if g.shape() == shape.as_slice() {
            return g.clone();
        }
        let offs = broadcast_offsets(g.shape(), &shape);
        let mut out = Tensor::zeros(shape);
        let d = out.data_mut();
        for (&o, &gv) in offs.iter().zip(g.data()) {
            d[o] += gv;
        }
        out
    }

    /// Elementwise binary adjoint with per-element partials `(dz/da, dz/db)`.
    fn binary_backward(
        &self,
        g: &Tensor,
        a: Var,
        b: Var,
        grads: &mut [Option<Tensor>],
        partials: impl Fn(f64, f64) -> (f64, f64),
    ) {
        let ta = &self.nodes[a.0].value;
        let tb = &self.nodes[b.0].value;
        let oa = broadcast_offsets(g.shape(), ta.shape());
        let ob = broadcast_offsets(g.shape(), tb.shape());
        let mut ga = Tensor::zeros(ta.shape().to_vec());
        let mut gb = Tensor::zeros(tb.shape().to_vec());
        for ((&i, &j), &gv) in oa.iter().zip(&ob).zip(g.data()) {
            let (pa, pb) = partials(ta.data()[i], tb.data()[j]);
            ga.data_mut()[i] += gv * pa;
            gb.data_mut()[j] += gv * pb;
        }
        self.accumulate(grads, a, ga);
        self.accumulate(grads, b, gb);
    }

    fn unary_backward(&self, g: &Tensor, a: Var, grads: &mut [Option<Tensor>], f: impl Fn(f64, f64) -> f64) {
        let out = &self.nodes[a.0].value;
        let data = out.data().iter().zip(g.data()).map(|(&x, &gv)| f(x, gv)).collect();
        let delta = Tensor::new(out.shape().to_vec(), data).expect("same shape");
        self.accumulate(grads, a, delta);
    }

    fn propagate(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                let ga = self.unbroadcast(g, *a);
                let gb = self.unbroadcast(g, *b);
                self.accumulate(grads, *a, ga);
                self.accumulate(grads, *b, gb);
            }
            Op::Sub(a, b) => {
                let ga = self.unbroadcast(g, *a);
                let gb = self.unbroadcast(g, *b).map(|v| -v);
                self.accumulate(grads, *a, ga);
                self.accumulate(grads, *b, gb);
            }
            Op::Mul(a, b) => self.binary_backward(g, *a, *b, grads, |x, y| (y, x)),
            Op::Div(a, b) => self.binary_backward(g, *a, *b, grads, |x, y| (1.0 / y, -x / (y * y))),
            Op::Scale(a, c) => {
                let c = *c;
                self.accumulate(grads, *a, g.map(|v| v * c));
            }
            Op::AddScalar(a) => self.accumulate(grads, *a, g.clone()),
            Op::MatMul(a, b) => {
                let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                if self.nodes[a.0].requires_grad {
                    let mut ga = vec![0.0; m * k];
                    matmul_bt(g.data(), tb.data(), m, n, k, &mut ga);
                    self.accumulate(grads, *a, Tensor::new([m, k], ga).expect("shape"));
                }
                if self.nodes[b.0].requires_grad {
                    let mut gb = vec![0.0; k * n];
                    matmul_at(ta.data(), g.data(), m, k, n, &mut gb);
                    self.accumulate(grads, *b, Tensor::new([k, n], gb).expect("shape"));
                }
            }
            Op::Affine(x, w, b) => {
                let (tx, tw, tb) = (&self.nodes[x.0].value, &self.nodes[w.0].value, &self.nodes[b.0].value);
                let (m, k, n) = (tx.shape()[0], tx.shape()[1], tw.shape()[1]);
                if self.nodes[x.0].requires_grad {
                    let mut gx = vec![0.0; m * k];
                    matmul_bt(g.data(), tw.data(), m, n, k, &mut gx);
                    self.accumulate(grads, *x, Tensor::new([m, k], gx).expect("shape"));
                }
                if self.nodes[w.0].requires_grad {
                    let mut gw = vec![0.0; k * n];
                    matmul_at(tx.data(), g.data(), m, k, n, &mut gw);
                    self.accumulate(grads, *w, Tensor::new([k, n], gw).expect("shape"));
                }
                if self.nodes[b.0].requires_grad {
                    let mut gb = vec![0.0; n];
                    for row in g.data().chunks(n) {
                        for (acc, v) in gb.iter_mut().zip(row) {
                            *acc += v;
                        }
                    }
                    self.accumulate(grads, *b, Tensor::new(tb.shape().to_vec(), gb).expect("shape"));
                }
            }
            Op::Bmm(a, b) => {
                let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                let (bn, n, p, q) = (ta.shape()[0], ta.shape()[1], ta.shape()[2], tb.shape()[2]);
                let mut ga = vec![0.0; bn * n * p];
                let mut gb = vec![0.0; bn * p * q];
                for s in 0..bn {
                    let gs = &g.data()[s * n * q..(s + 1) * n * q];
                    matmul_bt(gs, &tb.data()[s * p * q..(s + 1) * p * q], n, q, p, &mut ga[s * n * p..(s + 1) * n * p]);
                    matmul_at(&ta.data()[s * n * p..(s + 1) * n * p], gs, n, p, q, &mut gb[s * p * q..(s + 1) * p * q]);
                }
                self.accumulate(grads, *a, Tensor::new(ta.shape().to_vec(), ga).expect("shape"));
                self.accumulate(grads, *b, Tensor::new(tb.shape().to_vec(), gb).expect("shape"));
            }
            Op::Relu(a) => self.unary_backward(g, *a, grads, |x, gv| if x > 0.0 { gv } else { 0.0 }),
            Op::Tanh(a) => {
                let data = y.data().iter().zip(g.data()).map(|(&t, &gv)| gv * (1.0 - t * t)).collect();
                self.accumulate(grads, *a, Tensor::new(y.shape().to_vec(), data).expect("shape"));
            }
            Op::Exp(a) => {
                let data = y.data().iter().zip(g.data()).map(|(&e, &gv)| gv * e).collect();
                self.accumulate(grads, *a, Tensor::new(y.shape().to_vec(), data).expect("shape"));
            }
            Op::Log(a) => self.unary_backward(g, *a, grads, |x, gv| if x > LOG_FLOOR { gv / x } else { 0.0 }),
            Op::Softplus(a) => self.unary_backward(g, *a, grads, |x, gv| gv * sigmoid(x)),
            Op::Softmax(a) => {
                let w = y.last_dim().max(1);
                let mut out = Vec::with_capacity(y.numel());
                for (yr, gr) in y.data().chunks(w).zip(g.data().chunks(w)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    out.extend(yr.iter().zip(gr).map(|(&yv, &gv)| yv * (gv - dot)));
                }
                self.accumulate(grads, *a, Tensor::new(y.shape().to_vec(), out).expect("shape"));
            }
            Op::LogSoftmax(a) => {
                let w = y.last_dim().max(1);
                let mut out = Vec::with_capacity(y.numel());
                for (yr, gr) in y.data().chunks(w).zip(g.data().chunks(w)) {
                    let s: f64 = gr.iter().sum();
                    out.extend(yr.iter().zip(gr).map(|(&lv, &gv)| gv - lv.exp() * s));
                }
                self.accumulate(grads, *a, Tensor::new(y.shape().to_vec(), out).expect("shape"));
            }
            Op::BatchNorm { x, inv_std } => {
                let (n, f) = (y.shape()[0], y.shape()[1]);
                let mut gx = vec![0.0; n * f];
                let (yd, gd) = (y.data(), g.data());
                for j in 0..f {
                    let sum_g: f64 = (0..n).map(|i| gd[i * f + j]).sum();
                    let sum_gy: f64 = (0..n).map(|i| gd[i * f + j] * yd[i * f + j]).sum();
                    let scale = inv_std[j] / n as f64;
                    for i in 0..n {
                        gx[i * f + j] = scale * (n as f64 * gd[i * f + j] - sum_g - yd[i * f + j] * sum_gy);
                    }
                }
                self.accumulate(grads, *x, Tensor::new([n, f], gx).expect("shape"));
            }
            Op::RowNormalize { x, norms } => {
                let w = y.last_dim().max(1);
                let mut out = Vec::with_capacity(y.numel());
                for ((yr, gr), nrm) in y.data().chunks(w).zip(g.data().chunks(w)).zip(norms) {
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    out.extend(yr.iter().zip(gr).map(|(&yv, &gv)| (gv - yv * dot) / nrm));
                }
                self.accumulate(grads, *x, Tensor::new(y.shape().to_vec(), out).expect("shape"));
            }
            Op::SumAll(a) => {
                let shape = self.nodes[a.0].value.shape().to_vec();
                self.accumulate(grads, *a, Tensor::full(shape, g.item()));
            }
            Op::MeanAll(a) => {
                let t = &self.nodes[a.0].value;
                let v = g.item() / t.numel().max(1) as f64;
                self.accumulate(grads, *a, Tensor::full(t.shape().to_vec(), v));
            }
            Op::SumAxis { x, axis } => {
                let shape = self.nodes[x.0].value.shape().to_vec();
                let outer: usize = shape[..*axis].iter().product();
                let len = shape[*axis];
                let inner: usize = shape[axis + 1..].iter().product();
                let mut out = Vec::with_capacity(outer * len * inner);
                for o in 0..outer {
                    for _ in 0..len {
                        out.extend_from_slice(&g.data()[o * inner..(o + 1) * inner]);
                    }
                }
                self.accumulate(grads, *x, Tensor::new(shape, out).expect("shape"));
            }
            Op::GatherRows { x, idx } => {
                let shape = self.nodes[x.0].value.shape().to_vec();
                let width = g.numel() / idx.len().max(1);
                let mut out = Tensor::zeros(shape);
                for (r, &src) in idx.iter().enumerate() {
                    let gsrc = &g.data()[r * width..(r + 1) * width];
                    for (acc, v) in out.data_mut()[src * width..(src + 1) * width].iter_mut().zip(gsrc) {
                        *acc += v;
                    }
                }
                self.accumulate(grads, *x, out);
            }
            Op::PickCols { x, cols } => {
                let shape = self.nodes[x.0].value.shape().to_vec();
                let c = shape[1];
                let mut out = Tensor::zeros(shape);
                for (i, (&j, &gv)) in cols.iter().zip(g.data()).enumerate() {
                    out.data_mut()[i * c + j] += gv;
                }
                self.accumulate(grads, *x, out);
            }
            Op::Concat { inputs, axis } => {
                let shape = y.shape();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let total = shape[*axis] * inner;
                let mut start = 0;
                for &v in inputs {
                    let ts = self.nodes[v.0].value.shape().to_vec();
                    let chunk = ts[*axis] * inner;
                    let mut out = Vec::with_capacity(outer * chunk);
                    for o in 0..outer {
                        out.extend_from_slice(&g.data()[o * total + start..o * total + start + chunk]);
                    }
                    start += chunk;
                    self.accumulate(grads, v, Tensor::new(ts, out).expect("shape"));
                }
            }
            Op::Reshape(a) => {
                let shape = self.nodes[a.0].value.shape().to_vec();
                self.accumulate(grads, *a, g.reshape(shape).expect("shape"));
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn softplus_at_zero() {
        let mut g = Graph::new();
        let x = g.param(Tensor::scalar(0.0));
        let y = g.softplus(x);
        assert!(close(g.value(y).item(), std::f64::consts::LN_2, 1e-15));
        g.backward(y).unwrap();
        assert!(close(g.grad(x).unwrap().item(), 0.5, 1e-15));
    }

    #[test]
    fn tanh_at_zero() {
        let mut g = Graph::new();
        let x = g.param(Tensor::scalar(0.0));
        let y = g.tanh(x);
        assert_eq!(g.value(y).item(), 0.0);
        g.backward(y).unwrap();
        assert_eq!(g.grad(x).unwrap().item(), 1.0);
    }

    #[test]
    fn identity_matmul() {
        let a = Tensor::from_fn([3, 3], |i| (i as f64 * 0.37).sin());
        let mut g = Graph::new();
        let e = g.constant(Tensor::eye(3));
        let av = g.constant(a.clone());
        let y = g.matmul(e, av).unwrap();
        assert_eq!(g.value(y), &a);
    }

    #[test]
    fn matmul_shape_error_names_op() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros([2, 3]));
        let b = g.constant(Tensor::zeros([2, 3]));
        let err = g.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("matmul"), "{err}");
        assert!(err.contains("[2, 3]"), "{err}");
    }

    #[test]
    fn non_scalar_root_rejected() {
        let mut g = Graph::new();
        let a = g.param(Tensor::zeros([2]));
        assert!(matches!(g.backward(a), Err(TensorError::NonScalarRoot(_))));
    }

    #[test]
    fn leaf_used_twice_accumulates() {
        // y = x*x + 3x  => dy/dx = 2x + 3
        let mut g = Graph::new();
        let x = g.param(Tensor::scalar(1.5));
        let sq = g.mul(x, x).unwrap();
        let lin = g.scale(x, 3.0);
        let y = g.add(sq, lin).unwrap();
        g.backward(y).unwrap();
        assert!(close(g.grad(x).unwrap().item(), 6.0, 1e-14));
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut g = Graph::new();
        let x = g.param(Tensor::new([2], vec![1.0, 2.0]).unwrap());
        let c = g.constant(Tensor::new([2], vec![3.0, 4.0]).unwrap());
        let p = g.mul(x, c).unwrap();
        let s = g.sum(p);
        g.backward(s).unwrap();
        assert!(g.grad(c).is_none());
        assert_eq!(g.value(c).data(), &[3.0, 4.0]);
        assert_eq!(g.grad(x).unwrap().data(), &[3.0, 4.0]);
    }

    #[test]
    fn log_floor_is_counted() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new([3], vec![0.0, -1.0, 2.0]).unwrap());
        let y = g.log(x);
        assert_eq!(g.numerics().log_floor_hits, 2);
        assert!(close(g.value(y).data()[0], LOG_FLOOR.ln(), 1e-12));
    }

    #[test]
    fn broadcast_add_row_vector() {
        let mut g = Graph::new();
        let a = g.param(Tensor::from_fn([2, 3], |i| i as f64));
        let b = g.param(Tensor::new([3], vec![10.0, 20.0, 30.0]).unwrap());
        let y = g.add(a, b).unwrap();
        assert_eq!(g.value(y).data(), &[10.0, 21.0, 32.0, 13.0, 24.0, 35.0]);
        let s = g.sum(y);
        g.backward(s).unwrap();
        assert_eq!(g.grad(b).unwrap().data(), &[2.0, 2.0, 2.0]);
    }

    #[test]
    fn incompatible_broadcast_rejected() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros([2, 3]));
        let b = g.constant(Tensor::zeros([2]));
        assert!(g.add(a, b).is_err());
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::from_fn([4, 5], |i| (i as f64 * 1.7).sin() * 30.0));
        let y = g.softmax(a);
        for r in 0..4 {
            let s: f64 = g.value(y).row(r).iter().sum();
            assert!(close(s, 1.0, 1e-12));
        }
    }

    #[test]
    fn sum_axis_middle() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::from_fn([2, 3, 2], |i| i as f64));
        let y = g.sum_axis(a, 1).unwrap();
        assert_eq!(g.shape(y), &[2, 2]);
        assert_eq!(g.value(y).data(), &[6.0, 9.0, 24.0, 27.0]);
    }

    #[test]
    fn concat_last_axis() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::from_fn([2, 1], |i| i as f64));
        let b = g.constant(Tensor::from_fn([2, 2], |i| 10.0 + i as f64));
        let y = g.concat(&[a, b], 1).unwrap();
        assert_eq!(g.value(y).data(), &[0.0, 10.0, 11.0, 1.0, 12.0, 13.0]);
    }

    #[test]
    fn batch_norm_standardizes_columns() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::from_fn([6, 2], |i| (i * i) as f64));
        let y = g.batch_norm(a).unwrap();
        let v = g.value(y);
        for j in 0..2 {
            let m: f64 = (0..6).map(|i| v.data()[i * 2 + j]).sum::<f64>() / 6.0;
            assert!(close(m, 0.0, 1e-12));
        }
    }
}
