//! Tape-based reverse-mode differentiation.
//!
//! Forward operations are recorded on a [`Tape`] as they execute; each
//! returns a [`Var`] handle to its output. [`Tape::backward`] replays the
//! recorded adjoint rules in reverse order, accumulating gradients
//! additively into every tensor that was used more than once, and clears
//! the tape.

use std::ops::Range;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::numkit::params::{ParamId, ParameterStore};
use crate::numkit::tensor::{matmul_raw, transpose_raw, Tensor};

/// Handle to a value recorded on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Row-compressed constant matrix used for graph message passing and row
/// selection. Entries are `(column, weight)` pairs per row.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseMatrix {
    pub rows: usize,
    pub cols: usize,
    pub entries: Vec<Vec<(usize, f64)>>,
}

impl SparseMatrix {
    pub fn new(rows: usize, cols: usize, entries: Vec<Vec<(usize, f64)>>) -> Result<Self> {
        if entries.len() != rows || entries.iter().flatten().any(|&(c, _)| c >= cols) {
            return Err(Error::Contract(format!(
                "sparse matrix entries do not fit {rows}x{cols}"
            )));
        }
        Ok(SparseMatrix {
            rows,
            cols,
            entries,
        })
    }

    /// Selects `indices` as rows of an `indices.len() x cols` product.
    pub fn selection(indices: &[usize], cols: usize) -> Result<Self> {
        let entries = indices.iter().map(|&i| vec![(i, 1.0)]).collect();
        SparseMatrix::new(indices.len(), cols, entries)
    }

    pub fn to_dense(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.rows * self.cols];
        for (r, row) in self.entries.iter().enumerate() {
            for &(c, w) in row {
                out[r * self.cols + c] += w;
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Unary {
    Relu,
    Tanh,
    Sigmoid,
    Exp,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddBias(Var, Var),
    Unary(Unary, Var),
    Clamp(Var, f64, f64),
    Sum(Var),
    Mean(Var),
    SoftmaxRows(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
    L2NormalizeRows {
        input: Var,
        norms: Vec<f64>,
    },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceRows(Var, usize),
    SpMM(Arc<SparseMatrix>, Var),
    Reshape(Var),
    SegmentSoftmax(Var, Arc<Vec<Range<usize>>>),
    SegmentWeightedSum {
        weights: Var,
        values: Var,
        segments: Arc<Vec<Range<usize>>>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    param: Option<(u64, ParamId)>,
}

/// Gradients produced by one backward pass, keyed by leaf.
#[derive(Debug, Default)]
pub struct Gradients {
    leaves: Vec<(Var, Option<(u64, ParamId)>, Tensor)>,
}

impl Gradients {
    /// Gradient of the loss with respect to a leaf, if it was reachable.
    pub fn wrt(&self, var: Var) -> Option<&Tensor> {
        self.leaves
            .iter()
            .find(|(v, _, _)| *v == var)
            .map(|(_, _, g)| g)
    }

    /// Add the gradients of every parameter bound from `store` into its
    /// gradient buffers.
    pub fn accumulate_into(&self, store: &mut ParameterStore) {
        let sid = store.store_id();
        for (_, param, grad) in &self.leaves {
            if let Some((owner, id)) = param {
                if *owner == sid {
                    store.accumulate_grad(*id, grad.data());
                }
            }
        }
    }
}

/// Single-threaded recording of forward operations.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn check_finite(op: &'static str, data: &[f64]) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(op))
    }
}

fn require_rank2(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    t.dims2()
        .ok_or_else(|| Error::Contract(format!("{op} expects a matrix, got shape {:?}", t.shape())))
}

fn add_into(slot: &mut Option<Vec<f64>>, contribution: Vec<f64>) {
    match slot {
        Some(existing) => {
            for (e, c) in existing.iter_mut().zip(contribution) {
                *e += c;
            }
        }
        None => *slot = Some(contribution),
    }
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

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn emit(&mut self, name: &'static str, shape: Vec<usize>, data: Vec<f64>, op: Op, inputs: &[Var]) -> Result<Var> {
        check_finite(name, &data)?;
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let value = Tensor::new(shape, data)?;
        Ok(self.push(value, op, requires_grad))
    }

    /// Differentiable input that is not a stored parameter.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Non-differentiable input.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Bind a stored parameter; its gradient is routed back to `store`.
    pub fn param(&mut self, store: &ParameterStore, id: ParamId) -> Var {
        let v = self.push(store.value(id).clone(), Op::Leaf, true);
        self.nodes[v.0].param = Some((store.store_id(), id));
        v
    }

    /// Bind a stored parameter as a constant (frozen).
    pub fn frozen(&mut self, store: &ParameterStore, id: ParamId) -> Var {
        self.constant(store.value(id).clone())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = require_rank2("matmul", self.value(a))?;
        let (k2, n) = require_rank2("matmul", self.value(b))?;
        if k != k2 {
            return Err(Error::dim("matmul", self.shape(a), self.shape(b)));
        }
        let data = matmul_raw(self.value(a).data(), self.value(b).data(), m, k, n);
        self.emit("matmul", vec![m, n], data, Op::MatMul(a, b), &[a, b])
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (r, c) = require_rank2("transpose", self.value(a))?;
        let data = transpose_raw(self.value(a).data(), r, c);
        self.emit("transpose", vec![c, r], data, Op::Transpose(a), &[a])
    }

    /// Output shape for exact-shape or scalar broadcasting.
    fn broadcast_shape(&self, op: &'static str, a: Var, b: Var) -> Result<Vec<usize>> {
        let (sa, sb) = (self.value(a), self.value(b));
        if sa.shape() == sb.shape() || sb.is_scalar() {
            Ok(sa.shape().to_vec())
        } else if sa.is_scalar() {
            Ok(sb.shape().to_vec())
        } else {
            Err(Error::dim(op, sa.shape(), sb.shape()))
        }
    }

    fn binary(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        let shape = self.broadcast_shape(name, a, b)?;
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|i| {
                let x = if da.len() == 1 { da[0] } else { da[i] };
                let y = if db.len() == 1 { db[0] } else { db[i] };
                f(x, y)
            })
            .collect();
        self.emit(name, shape, data, op, &[a, b])
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

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let t = self.value(a);
        let data = t.data().iter().map(|v| v * c).collect();
        self.emit("scale", t.shape().to_vec(), data, Op::Scale(a, c), &[a])
    }

    /// `x[i, :] + b` for every row of `x`; `b` has one element per column.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (rows, cols) = require_rank2("add_bias", self.value(x))?;
        if self.value(b).numel() != cols {
            return Err(Error::dim("add_bias", self.shape(x), self.shape(b)));
        }
        let bias = self.value(b).data();
        let mut data = self.value(x).data().to_vec();
        for r in 0..rows {
            for (v, bv) in data[r * cols..(r + 1) * cols].iter_mut().zip(bias) {
                *v += bv;
            }
        }
        self.emit("add_bias", vec![rows, cols], data, Op::AddBias(x, b), &[x, b])
    }

    pub fn unary(&mut self, kind: Unary, a: Var) -> Result<Var> {
        let t = self.value(a);
        let f: fn(f64) -> f64 = match kind {
            Unary::Relu => |v| v.max(0.0),
            Unary::Tanh => f64::tanh,
            Unary::Sigmoid => sigmoid,
            Unary::Exp => f64::exp,
        };
        let data = t.data().iter().map(|&v| f(v)).collect();
        let name = match kind {
            Unary::Relu => "relu",
            Unary::Tanh => "tanh",
            Unary::Sigmoid => "sigmoid",
            Unary::Exp => "exp",
        };
        self.emit(name, t.shape().to_vec(), data, Op::Unary(kind, a), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Relu, a)
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Tanh, a)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Sigmoid, a)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Exp, a)
    }

    /// Clamp into `[lo, hi]`; gradient passes only where the input is inside.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Result<Var> {
        let t = self.value(a);
        let data = t.data().iter().map(|v| v.clamp(lo, hi)).collect();
        self.emit("clamp", t.shape().to_vec(), data, Op::Clamp(a, lo, hi), &[a])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().sum();
        self.emit("sum", vec![1], vec![s], Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let s = t.data().iter().sum::<f64>() / t.numel() as f64;
        self.emit("mean", vec![1], vec![s], Op::Mean(a), &[a])
    }

    /// Softmax along the last axis (max-subtracted).
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let (rows, cols) = t.as_rows();
        let mut data = t.data().to_vec();
        for r in 0..rows {
            softmax_in_place(&mut data[r * cols..(r + 1) * cols]);
        }
        self.emit("softmax", t.shape().to_vec(), data, Op::SoftmaxRows(a), &[a])
    }

    /// Mean over rows of `-log softmax(logits)[i, targets[i]]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (n, c) = require_rank2("softmax_cross_entropy", self.value(logits))?;
        if targets.len() != n {
            return Err(Error::Contract(format!(
                "softmax_cross_entropy: {n} rows but {} targets",
                targets.len()
            )));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= c) {
            return Err(Error::Index(format!(
                "target class {bad} out of range for {c} classes"
            )));
        }
        let x = self.value(logits).data();
        let mut probs = vec![0.0; n * c];
        let mut loss = 0.0;
        for i in 0..n {
            let row = &x[i * c..(i + 1) * c];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let sum_exp: f64 = row.iter().map(|v| (v - max).exp()).sum();
            let log_z = max + sum_exp.ln();
            loss += log_z - row[targets[i]];
            for j in 0..c {
                probs[i * c + j] = (row[j] - log_z).exp();
            }
        }
        loss /= n as f64;
        self.emit(
            "softmax_cross_entropy",
            vec![1],
            vec![loss],
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            &[logits],
        )
    }

    /// Normalize each vector along the last axis to unit Euclidean norm.
    pub fn l2_normalize(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let (rows, cols) = t.as_rows();
        let mut data = t.data().to_vec();
        let mut norms = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = &mut data[r * cols..(r + 1) * cols];
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm <= super::NORM_EPSILON {
                return Err(Error::DegenerateVector {
                    norm,
                    epsilon: super::NORM_EPSILON,
                });
            }
            row.iter_mut().for_each(|v| *v /= norm);
            norms.push(norm);
        }
        let shape = t.shape().to_vec();
        self.emit("l2_normalize", shape, data, Op::L2NormalizeRows { input: a, norms }, &[a])
    }

    /// Concatenate along the last axis. Inputs share rank and leading dims.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Contract("concat of nothing".into()))?;
        let lead: Vec<usize> = {
            let s = self.shape(first);
            s[..s.len() - 1].to_vec()
        };
        let rows: usize = lead.iter().product();
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != lead.len() + 1 || s[..s.len() - 1] != lead[..] {
                return Err(Error::dim("concat", self.shape(first), s));
            }
            total += s[s.len() - 1];
        }
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row_slice(r));
            }
        }
        let mut shape = lead;
        shape.push(total);
        self.emit("concat", shape, data, Op::ConcatCols(parts.to_vec()), parts)
    }

    /// Stack matrices with equal column counts vertically.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Contract("concat of nothing".into()))?;
        let (_, cols) = require_rank2("concat_rows", self.value(first))?;
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let (r, c) = require_rank2("concat_rows", self.value(p))?;
            if c != cols {
                return Err(Error::dim("concat_rows", self.shape(first), self.shape(p)));
            }
            rows += r;
            data.extend_from_slice(self.value(p).data());
        }
        self.emit("concat_rows", vec![rows, cols], data, Op::ConcatRows(parts.to_vec()), parts)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (rows, cols) = require_rank2("slice_rows", self.value(a))?;
        if len == 0 || start + len > rows {
            return Err(Error::Index(format!(
                "rows {start}..{} out of range for {rows} rows",
                start + len
            )));
        }
        let data = self.value(a).data()[start * cols..(start + len) * cols].to_vec();
        self.emit("slice_rows", vec![len, cols], data, Op::SliceRows(a, start), &[a])
    }

    /// `s · x` for a constant sparse `s`.
    pub fn spmm(&mut self, s: Arc<SparseMatrix>, x: Var) -> Result<Var> {
        let (rows, cols) = require_rank2("spmm", self.value(x))?;
        if s.cols != rows {
            return Err(Error::dim("spmm", &[s.rows, s.cols], &[rows, cols]));
        }
        let xd = self.value(x).data();
        let mut data = vec![0.0; s.rows * cols];
        for (r, row) in s.entries.iter().enumerate() {
            let out = &mut data[r * cols..(r + 1) * cols];
            for &(c, w) in row {
                for (o, v) in out.iter_mut().zip(&xd[c * cols..(c + 1) * cols]) {
                    *o += w * v;
                }
            }
        }
        let out_rows = s.rows;
        self.emit("spmm", vec![out_rows, cols], data, Op::SpMM(s, x), &[x])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).reshaped(shape)?;
        let rg = self.requires_grad(a);
        Ok(self.push(t, Op::Reshape(a), rg))
    }

    /// Softmax of a column of scores (`N x 1`) within each row segment.
    pub fn segment_softmax(&mut self, scores: Var, segments: Arc<Vec<Range<usize>>>) -> Result<Var> {
        let (n, c) = require_rank2("segment_softmax", self.value(scores))?;
        check_segments(&segments, n, c)?;
        let mut data = self.value(scores).data().to_vec();
        for seg in segments.iter() {
            softmax_in_place(&mut data[seg.clone()]);
        }
        self.emit("segment_softmax", vec![n, 1], data, Op::SegmentSoftmax(scores, segments), &[scores])
    }

    /// Row `s` of the output is `Σ_{i in segment s} weights[i] · values[i, :]`.
    pub fn segment_weighted_sum(
        &mut self,
        weights: Var,
        values: Var,
        segments: Arc<Vec<Range<usize>>>,
    ) -> Result<Var> {
        let (n, c) = require_rank2("segment_weighted_sum", self.value(weights))?;
        check_segments(&segments, n, c)?;
        let (vn, d) = require_rank2("segment_weighted_sum", self.value(values))?;
        if vn != n {
            return Err(Error::dim("segment_weighted_sum", self.shape(weights), self.shape(values)));
        }
        let w = self.value(weights).data();
        let v = self.value(values).data();
        let mut data = vec![0.0; segments.len() * d];
        for (s, seg) in segments.iter().enumerate() {
            let out = &mut data[s * d..(s + 1) * d];
            for i in seg.clone() {
                for (o, x) in out.iter_mut().zip(&v[i * d..(i + 1) * d]) {
                    *o += w[i] * x;
                }
            }
        }
        let rows = segments.len();
        self.emit(
            "segment_weighted_sum",
            vec![rows, d],
            data,
            Op::SegmentWeightedSum {
                weights,
                values,
                segments,
            },
            &[weights, values],
        )
    }

    /// Propagate adjoints from a scalar `loss` to every reachable leaf and
    /// clear the tape.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if !self.value(loss).is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        let mut out = Gradients::default();

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            self.propagate(i, g, &mut grads, &mut out)?;
        }
        out.leaves.reverse();
        self.nodes.clear();
        Ok(out)
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(
        &self,
        i: usize,
        g: Vec<f64>,
        grads: &mut [Option<Vec<f64>>],
        out: &mut Gradients,
    ) -> Result<()> {
        let node = &self.nodes[i];
        let y = node.value.data();
        match &node.op {
            Op::Leaf => {
                let t = Tensor::new(node.value.shape().to_vec(), g)?;
                out.leaves.push((Var(i), node.param, t));
            }
            Op::MatMul(a, b) => {
                let (m, k) = self.value(*a).dims2().expect("checked");
                let (_, n) = self.value(*b).dims2().expect("checked");
                if self.wants(*a) {
                    let bt = transpose_raw(self.value(*b).data(), k, n);
                    add_into(&mut grads[a.0], matmul_raw(&g, &bt, m, n, k));
                }
                if self.wants(*b) {
                    let at = transpose_raw(self.value(*a).data(), m, k);
                    add_into(&mut grads[b.0], matmul_raw(&at, &g, k, m, n));
                }
            }
            Op::Transpose(a) => {
                let (r, c) = self.value(*a).dims2().expect("checked");
                add_into(&mut grads[a.0], transpose_raw(&g, c, r));
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                if self.wants(*a) {
                    add_into(&mut grads[a.0], reduce_broadcast(&g, self.value(*a).numel(), 1.0));
                }
                if self.wants(*b) {
                    add_into(&mut grads[b.0], reduce_broadcast(&g, self.value(*b).numel(), sign));
                }
            }
            Op::Mul(a, b) => {
                let (da, db) = (self.value(*a).data(), self.value(*b).data());
                let at = |d: &[f64], j: usize| if d.len() == 1 { d[0] } else { d[j] };
                if self.wants(*a) {
                    let full: Vec<f64> = g.iter().enumerate().map(|(j, gj)| gj * at(db, j)).collect();
                    add_into(&mut grads[a.0], reduce_broadcast(&full, da.len(), 1.0));
                }
                if self.wants(*b) {
                    let full: Vec<f64> = g.iter().enumerate().map(|(j, gj)| gj * at(da, j)).collect();
                    add_into(&mut grads[b.0], reduce_broadcast(&full, db.len(), 1.0));
                }
            }
            Op::Scale(a, c) => {
                add_into(&mut grads[a.0], g.iter().map(|v| v * c).collect());
            }
            Op::AddBias(x, b) => {
                let cols = self.value(*b).numel();
                if self.wants(*b) {
                    let mut gb = vec![0.0; cols];
                    for row in g.chunks(cols) {
                        for (s, v) in gb.iter_mut().zip(row) {
                            *s += v;
                        }
                    }
                    add_into(&mut grads[b.0], gb);
                }
                if self.wants(*x) {
                    add_into(&mut grads[x.0], g);
                }
            }
            Op::Unary(kind, a) => {
                let x = self.value(*a).data();
                let local: Vec<f64> = match kind {
                    Unary::Relu => g.iter().zip(x).map(|(gv, xv)| if *xv > 0.0 { *gv } else { 0.0 }).collect(),
                    Unary::Tanh => g.iter().zip(y).map(|(gv, yv)| gv * (1.0 - yv * yv)).collect(),
                    Unary::Sigmoid => g.iter().zip(y).map(|(gv, yv)| gv * yv * (1.0 - yv)).collect(),
                    Unary::Exp => g.iter().zip(y).map(|(gv, yv)| gv * yv).collect(),
                };
                add_into(&mut grads[a.0], local);
            }
            Op::Clamp(a, lo, hi) => {
                let x = self.value(*a).data();
                let local = g
                    .iter()
                    .zip(x)
                    .map(|(gv, xv)| if *xv >= *lo && *xv <= *hi { *gv } else { 0.0 })
                    .collect();
                add_into(&mut grads[a.0], local);
            }
            Op::Sum(a) => {
                add_into(&mut grads[a.0], vec![g[0]; self.value(*a).numel()]);
            }
            Op::Mean(a) => {
                let n = self.value(*a).numel();
                add_into(&mut grads[a.0], vec![g[0] / n as f64; n]);
            }
            Op::SoftmaxRows(a) => {
                let (_, cols) = node.value.as_rows();
                let mut local = vec![0.0; g.len()];
                for ((lr, gr), yr) in local.chunks_mut(cols).zip(g.chunks(cols)).zip(y.chunks(cols)) {
                    softmax_adjoint(lr, gr, yr);
                }
                add_into(&mut grads[a.0], local);
            }
            Op::CrossEntropy { logits, targets, probs } => {
                let n = targets.len();
                let c = probs.len() / n;
                let scale = g[0] / n as f64;
                let mut local: Vec<f64> = probs.iter().map(|p| p * scale).collect();
                for (row, &t) in targets.iter().enumerate() {
                    local[row * c + t] -= scale;
                }
                add_into(&mut grads[logits.0], local);
            }
            Op::L2NormalizeRows { input, norms } => {
                let (_, cols) = node.value.as_rows();
                let mut local = vec![0.0; g.len()];
                for (r, norm) in norms.iter().enumerate() {
                    let span = r * cols..(r + 1) * cols;
                    let (yr, gr) = (&y[span.clone()], &g[span.clone()]);
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for ((l, yv), gv) in local[span].iter_mut().zip(yr).zip(gr) {
                        *l = (gv - yv * dot) / norm;
                    }
                }
                add_into(&mut grads[input.0], local);
            }
            Op::ConcatCols(parts) => {
                let (rows, total) = node.value.as_rows();
                let mut offset = 0;
                for p in parts {
                    let (_, w) = self.value(*p).as_rows();
                    if self.wants(*p) {
                        let mut local = Vec::with_capacity(rows * w);
                        for r in 0..rows {
                            local.extend_from_slice(&g[r * total + offset..r * total + offset + w]);
                        }
                        add_into(&mut grads[p.0], local);
                    }
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let n = self.value(*p).numel();
                    if self.wants(*p) {
                        add_into(&mut grads[p.0], g[offset..offset + n].to_vec());
                    }
                    offset += n;
                }
            }
            Op::SliceRows(a, start) => {
                let (_, cols) = node.value.as_rows();
                let mut local = vec![0.0; self.value(*a).numel()];
                local[start * cols..start * cols + g.len()].copy_from_slice(&g);
                add_into(&mut grads[a.0], local);
            }
            Op::SpMM(s, x) => {
                let (rows, cols) = self.value(*x).dims2().expect("checked");
                let mut local = vec![0.0; rows * cols];
                for (r, row) in s.entries.iter().enumerate() {
                    let gr = &g[r * cols..(r + 1) * cols];
                    for &(c, w) in row {
                        for (l, gv) in local[c * cols..(c + 1) * cols].iter_mut().zip(gr) {
                            *l += w * gv;
                        }
                    }
                }
                add_into(&mut grads[x.0], local);
            }
            Op::Reshape(a) => {
                add_into(&mut grads[a.0], g);
            }
            Op::SegmentSoftmax(a, segments) => {
                let mut local = vec![0.0; g.len()];
                for seg in segments.iter() {
                    softmax_adjoint(&mut local[seg.clone()], &g[seg.clone()], &y[seg.clone()]);
                }
                add_into(&mut grads[a.0], local);
            }
            Op::SegmentWeightedSum {
                weights,
                values,
                segments,
            } => {
                let w = self.value(*weights).data();
                let v = self.value(*values).data();
                let d = node.value.as_rows().1;
                if self.wants(*weights) {
                    let mut gw = vec![0.0; w.len()];
                    for (s, seg) in segments.iter().enumerate() {
                        let gs = &g[s * d..(s + 1) * d];
                        for i in seg.clone() {
                            gw[i] = gs.iter().zip(&v[i * d..(i + 1) * d]).map(|(a, b)| a * b).sum();
                        }
                    }
                    add_into(&mut grads[weights.0], gw);
                }
                if self.wants(*values) {
                    let mut gv = vec![0.0; v.len()];
                    for (s, seg) in segments.iter().enumerate() {
                        let gs = &g[s * d..(s + 1) * d];
                        for i in seg.clone() {
                            for (o, x) in gv[i * d..(i + 1) * d].iter_mut().zip(gs) {
                                *o = w[i] * x;
                            }
                        }
                    }
                    add_into(&mut grads[values.0], gv);
                }
            }
        }
        Ok(())
    }
}

fn check_segments(segments: &[Range<usize>], n: usize, cols: usize) -> Result<()> {
    if cols != 1 {
        return Err(Error::Contract(format!("segment ops expect an N x 1 column, got {cols} columns")));
    }
    let mut next = 0;
    for seg in segments {
        if seg.start != next || seg.end <= seg.start {
            return Err(Error::Contract(format!("segments must tile 0..{n} contiguously")));
        }
        next = seg.end;
    }
    if next != n {
        return Err(Error::Contract(format!("segments must tile 0..{n} contiguously")));
    }
    Ok(())
}

pub(crate) fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

fn softmax_adjoint(out: &mut [f64], g: &[f64], y: &[f64]) {
    let dot: f64 = g.iter().zip(y).map(|(a, b)| a * b).sum();
    for ((o, gv), yv) in out.iter_mut().zip(g).zip(y) {
        *o = yv * (gv - dot);
    }
}

/// Collapse a broadcast gradient back to an operand with `len` elements.
fn reduce_broadcast(g: &[f64], len: usize, sign: f64) -> Vec<f64> {
    if len == g.len() {
        g.iter().map(|v| v * sign).collect()
    } else {
        vec![sign * g.iter().sum::<f64>()]
    }
}
