//! Reverse-mode differentiation over a small, closed operator set.
//!
//! A [`Tape`] records every operation applied to its [`Var`] handles in
//! creation order, which is by construction a topological order of the
//! compute graph. [`Var::backward`] walks the records once in reverse,
//! accumulating gradients only through nodes that can reach a trainable
//! leaf — constants (EMA outputs, queue entries, target codes) never
//! receive or propagate gradient.
//!
//! The operator set is intentionally fixed: every loss in this crate must
//! compose from the variants of [`Op`], which keeps each backward rule
//! small enough to audit by hand.

use std::cell::{Cell, RefCell};
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{dot_slices, matmul_at_into, matmul_bt_into, Tensor};

/// Norm floor used by the guarded row normalization.
pub const NORM_EPS: f64 = 1e-8;

/// Sentinel written to masked positions of a masked log-softmax. Finite so
/// that `exp` underflows to exactly zero without producing NaN downstream.
pub const MASKED_LOG: f64 = -1e30;

#[derive(Debug)]
enum Op {
    Leaf,
    Add(usize, usize),
    AddBias(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Neg(usize),
    Scale(usize, f64),
    AddScalar(usize),
    MatMul(usize, usize),
    Transpose(usize),
    Relu(usize),
    Log(usize),
    Exp(usize),
    Sqrt(usize),
    Clamp(usize, f64, f64),
    Minimum(usize, usize),
    SoftmaxRows(usize, f64),
    MaskedLogSoftmaxRows(usize, Rc<Vec<bool>>),
    L2NormalizeRows { x: usize, guarded: bool, norms: Vec<f64> },
    CosineSim(usize, usize),
    GatherRows(usize, Rc<Vec<usize>>),
    SelectRows(usize, Rc<Vec<usize>>),
    ConcatCols(usize, usize),
    Sum(usize),
    Mean(usize),
    SumRows(usize),
    CenterCols(usize),
    RowBlockDot { q: usize, keys: usize, block: usize },
    RowBlockMix { w: usize, vals: usize, block: usize },
    Reshape(usize),
}

struct Node<S: Scalar> {
    value: Tensor<S>,
    op: Op,
    requires_grad: bool,
}

struct TapeInner<S: Scalar> {
    nodes: Vec<Node<S>>,
}

/// Recording tape for one forward/backward pass. Cheap to clone (shared
/// handle); never shared across threads.
pub struct Tape<S: Scalar> {
    inner: Rc<RefCell<TapeInner<S>>>,
    warnings: Rc<Cell<u64>>,
}

impl<S: Scalar> Clone for Tape<S> {
    fn clone(&self) -> Self {
        Tape { inner: Rc::clone(&self.inner), warnings: Rc::clone(&self.warnings) }
    }
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape {
            inner: Rc::new(RefCell::new(TapeInner { nodes: Vec::new() })),
            warnings: Rc::new(Cell::new(0)),
        }
    }

    fn push(&self, value: Tensor<S>, op: Op, requires_grad: bool) -> Var<S> {
        let mut inner = self.inner.borrow_mut();
        let idx = inner.nodes.len();
        inner.nodes.push(Node { value, op, requires_grad });
        Var { tape: self.clone(), idx }
    }

    /// Trainable leaf: gradients accumulate here.
    pub fn param(&self, value: Tensor<S>) -> Var<S> {
        self.push(value, Op::Leaf, true)
    }

    /// Constant leaf: structurally detached from every gradient path.
    pub fn constant(&self, value: Tensor<S>) -> Var<S> {
        self.push(value, Op::Leaf, false)
    }

    pub fn scalar_const(&self, value: S) -> Var<S> {
        self.constant(Tensor::scalar(value))
    }

    /// Number of nodes recorded so far.
    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Count of guarded normalizations that hit the norm floor.
    pub fn warning_count(&self) -> u64 {
        self.warnings.get()
    }

    fn same_tape(&self, other: &Tape<S>) -> bool {
        Rc::ptr_eq(&self.inner, &other.inner)
    }
}

/// Handle to a node on a [`Tape`].
pub struct Var<S: Scalar> {
    tape: Tape<S>,
    idx: usize,
}

impl<S: Scalar> Clone for Var<S> {
    fn clone(&self) -> Self {
        Var { tape: self.tape.clone(), idx: self.idx }
    }
}

/// Gradients produced by one backward pass, indexed by node.
pub struct Gradients<S: Scalar> {
    grads: Vec<Option<Tensor<S>>>,
}

impl<S: Scalar> Gradients<S> {
    /// Gradient of the loss w.r.t. `var`, if any reached it. Constants and
    /// unused parameters have no entry.
    pub fn get(&self, var: &Var<S>) -> Option<&Tensor<S>> {
        self.grads.get(var.idx).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, var: &Var<S>) -> Option<Tensor<S>> {
        self.grads.get_mut(var.idx).and_then(|g| g.take())
    }

    /// Gradient, or a zero tensor of the variable's shape when untouched.
    pub fn get_or_zeros(&self, var: &Var<S>) -> Tensor<S> {
        match self.get(var) {
            Some(g) => g.clone(),
            None => Tensor::zeros(&var.shape()),
        }
    }

    /// True when every accumulated gradient is finite.
    pub fn all_finite(&self) -> bool {
        self.grads.iter().flatten().all(|g| g.all_finite())
    }
}

macro_rules! binary_same_shape {
    ($name:ident, $opname:ident, $fwd:expr) => {
        pub fn $name(&self, other: &Var<S>) -> Result<Var<S>> {
            let (va, vb) = self.pair_values(other)?;
            let out = va.zip(&vb, $fwd)?;
            let rg = self.requires_grad() || other.requires_grad();
            Ok(self.tape.push(out, Op::$opname(self.idx, other.idx), rg))
        }
    };
}

impl<S: Scalar> Var<S> {
    pub fn value(&self) -> Tensor<S> {
        self.tape.inner.borrow().nodes[self.idx].value.clone()
    }

    /// Handle to the tape this variable lives on.
    pub fn tape(&self) -> Tape<S> {
        self.tape.clone()
    }

    /// Read the node value without cloning.
    pub fn with_value<T>(&self, f: impl FnOnce(&Tensor<S>) -> T) -> T {
        f(&self.tape.inner.borrow().nodes[self.idx].value)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.with_value(|t| t.shape().to_vec())
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.inner.borrow().nodes[self.idx].requires_grad
    }

    /// Scalar payload of a rank-0/length-1 node.
    pub fn scalar_value(&self) -> S {
        self.with_value(|t| t.value())
    }

    fn pair_values(&self, other: &Var<S>) -> Result<(Tensor<S>, Tensor<S>)> {
        if !self.tape.same_tape(&other.tape) {
            return Err(Error::structure("operands recorded on different tapes"));
        }
        Ok((self.value(), other.value()))
    }

    binary_same_shape!(add, Add, |a, b| a + b);
    binary_same_shape!(sub, Sub, |a, b| a - b);
    binary_same_shape!(mul, Mul, |a, b| a * b);

    pub fn div(&self, other: &Var<S>) -> Result<Var<S>> {
        let (va, vb) = self.pair_values(other)?;
        if vb.data().iter().any(|v| *v == S::zero()) {
            return Err(Error::domain("division by zero"));
        }
        let out = va.zip(&vb, |a, b| a / b)?;
        let rg = self.requires_grad() || other.requires_grad();
        Ok(self.tape.push(out, Op::Div(self.idx, other.idx), rg))
    }

    /// Broadcast-add a bias vector to every row of a matrix.
    pub fn add_bias(&self, bias: &Var<S>) -> Result<Var<S>> {
        let (m, b) = self.pair_values(bias)?;
        if m.rank() != 2 || b.rank() != 1 || m.cols() != b.len() {
            return Err(Error::shape(format!(
                "add_bias {:?} + {:?}",
                m.shape(),
                b.shape()
            )));
        }
        let cols = m.cols();
        let mut out = m;
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            *v = *v + b.data()[i % cols];
        }
        let rg = self.requires_grad() || bias.requires_grad();
        Ok(self.tape.push(out, Op::AddBias(self.idx, bias.idx), rg))
    }

    pub fn neg(&self) -> Var<S> {
        let out = self.value().map(|v| -v);
        self.tape.push(out, Op::Neg(self.idx), self.requires_grad())
    }

    pub fn scale(&self, k: S) -> Var<S> {
        let out = self.value().map(|v| v * k);
        self.tape.push(out, Op::Scale(self.idx, k.to_f64_lossy()), self.requires_grad())
    }

    pub fn add_scalar(&self, k: S) -> Var<S> {
        let out = self.value().map(|v| v + k);
        self.tape.push(out, Op::AddScalar(self.idx), self.requires_grad())
    }

    pub fn matmul(&self, other: &Var<S>) -> Result<Var<S>> {
        let (a, b) = self.pair_values(other)?;
        let out = a.matmul(&b)?;
        let rg = self.requires_grad() || other.requires_grad();
        Ok(self.tape.push(out, Op::MatMul(self.idx, other.idx), rg))
    }

    pub fn transpose(&self) -> Result<Var<S>> {
        let v = self.value();
        if v.rank() != 2 {
            return Err(Error::shape("transpose needs a matrix"));
        }
        let out = v.transpose();
        Ok(self.tape.push(out, Op::Transpose(self.idx), self.requires_grad()))
    }

    pub fn relu(&self) -> Var<S> {
        let out = self.value().map(|v| if v > S::zero() { v } else { S::zero() });
        self.tape.push(out, Op::Relu(self.idx), self.requires_grad())
    }

    pub fn log(&self) -> Result<Var<S>> {
        let v = self.value();
        if v.data().iter().any(|x| *x <= S::zero()) {
            return Err(Error::domain("log of non-positive value"));
        }
        let out = v.map(|x| x.ln());
        Ok(self.tape.push(out, Op::Log(self.idx), self.requires_grad()))
    }

    pub fn exp(&self) -> Var<S> {
        let out = self.value().map(|x| x.exp());
        self.tape.push(out, Op::Exp(self.idx), self.requires_grad())
    }

    pub fn sqrt(&self) -> Result<Var<S>> {
        let v = self.value();
        if v.data().iter().any(|x| *x <= S::zero()) {
            return Err(Error::domain("sqrt of non-positive value"));
        }
        let out = v.map(|x| x.sqrt());
        Ok(self.tape.push(out, Op::Sqrt(self.idx), self.requires_grad()))
    }

    /// Elementwise clamp; gradient passes only through the interior.
    pub fn clamp(&self, lo: S, hi: S) -> Var<S> {
        let out = self.value().map(|x| x.max(lo).min(hi));
        self.tape.push(
            out,
            Op::Clamp(self.idx, lo.to_f64_lossy(), hi.to_f64_lossy()),
            self.requires_grad(),
        )
    }

    /// Elementwise minimum; ties route gradient to `self`.
    pub fn minimum(&self, other: &Var<S>) -> Result<Var<S>> {
        let (a, b) = self.pair_values(other)?;
        let out = a.zip(&b, |x, y| if x <= y { x } else { y })?;
        let rg = self.requires_grad() || other.requires_grad();
        Ok(self.tape.push(out, Op::Minimum(self.idx, other.idx), rg))
    }

    /// Temperature-scaled row softmax with max subtraction.
    pub fn softmax_rows(&self, temperature: S) -> Result<Var<S>> {
        if temperature <= S::zero() {
            return Err(Error::domain("softmax temperature must be positive"));
        }
        let v = self.value();
        if !v.all_finite() {
            return Err(Error::domain("softmax over non-finite logits"));
        }
        if v.is_empty() {
            return Err(Error::shape("softmax over empty tensor"));
        }
        let rows = v.rows();
        let cols = v.cols();
        let mut out = v.clone();
        for r in 0..rows {
            let row = &mut out.data_mut()[r * cols..(r + 1) * cols];
            softmax_slice(row, temperature);
        }
        Ok(self.tape.push(
            out,
            Op::SoftmaxRows(self.idx, temperature.to_f64_lossy()),
            self.requires_grad(),
        ))
    }

    /// Row-wise log-softmax over unmasked entries. Masked positions receive
    /// the [`MASKED_LOG`] sentinel, so `exp` of the output is an exact zero
    /// there. `mask` is row-major with the same element count as `self`.
    pub fn masked_log_softmax_rows(&self, mask: Rc<Vec<bool>>) -> Result<Var<S>> {
        let v = self.value();
        if mask.len() != v.len() {
            return Err(Error::shape("mask length must match tensor length"));
        }
        let rows = v.rows();
        let cols = v.cols();
        let mut out = v.clone();
        for r in 0..rows {
            let base = r * cols;
            let row_mask = &mask[base..base + cols];
            if !row_mask.iter().any(|&m| m) {
                return Err(Error::domain(format!("row {r} is fully masked")));
            }
            let row = &mut out.data_mut()[base..base + cols];
            for (x, &keep) in row.iter().zip(row_mask) {
                if keep && !x.is_finite() {
                    return Err(Error::domain("non-finite unmasked logit"));
                }
            }
            log_softmax_slice_masked(row, row_mask);
        }
        Ok(self.tape.push(out, Op::MaskedLogSoftmaxRows(self.idx, mask), self.requires_grad()))
    }

    /// Strict row normalization: errors on a zero-norm row.
    pub fn l2_normalize_rows(&self) -> Result<Var<S>> {
        let v = self.value();
        let (out, norms) = v.l2_normalized_rows(S::of(NORM_EPS));
        if norms.iter().any(|n| *n == S::zero()) {
            return Err(Error::domain("cannot normalize zero-norm row"));
        }
        let norms = norms.iter().map(|n| n.to_f64_lossy()).collect();
        Ok(self.tape.push(
            out,
            Op::L2NormalizeRows { x: self.idx, guarded: false, norms },
            self.requires_grad(),
        ))
    }

    /// Guarded row normalization for training paths: rows below the norm
    /// floor are divided by [`NORM_EPS`] and counted on the tape.
    pub fn l2_normalize_rows_guarded(&self) -> Var<S> {
        let v = self.value();
        let eps = S::of(NORM_EPS);
        let (out, norms) = v.l2_normalized_rows(eps);
        let hits = norms.iter().filter(|n| **n < eps).count() as u64;
        if hits > 0 {
            self.tape.warnings.set(self.tape.warnings.get() + hits);
        }
        let norms = norms.iter().map(|n| n.to_f64_lossy()).collect();
        self.tape.push(
            out,
            Op::L2NormalizeRows { x: self.idx, guarded: true, norms },
            self.requires_grad(),
        )
    }

    /// Cosine similarity of two vectors; errors on zero-norm input.
    pub fn cosine_sim(&self, other: &Var<S>) -> Result<Var<S>> {
        let (a, b) = self.pair_values(other)?;
        if a.rank() != 1 || b.rank() != 1 || a.len() != b.len() || a.is_empty() {
            return Err(Error::shape(format!(
                "cosine_sim needs equal-length vectors, got {:?} and {:?}",
                a.shape(),
                b.shape()
            )));
        }
        let na = a.norm();
        let nb = b.norm();
        if na == S::zero() || nb == S::zero() {
            return Err(Error::domain("cosine similarity of zero-norm vector"));
        }
        let y = dot_slices(a.data(), b.data()) / (na * nb);
        let rg = self.requires_grad() || other.requires_grad();
        Ok(self.tape.push(Tensor::scalar(y), Op::CosineSim(self.idx, other.idx), rg))
    }

    /// out[i] = self[i, idx[i]] — one element per row.
    pub fn gather_rows(&self, idx: Rc<Vec<usize>>) -> Result<Var<S>> {
        let v = self.value();
        if v.rank() != 2 || idx.len() != v.rows() {
            return Err(Error::shape("gather_rows needs one index per matrix row"));
        }
        let cols = v.cols();
        let mut out = Vec::with_capacity(idx.len());
        for (r, &c) in idx.iter().enumerate() {
            if c >= cols {
                return Err(Error::structure(format!("gather index {c} out of {cols} cols")));
            }
            out.push(v.get(r, c));
        }
        Ok(self.tape.push(Tensor::vector(out), Op::GatherRows(self.idx, idx), self.requires_grad()))
    }

    /// Copy of the given rows, in order.
    pub fn select_rows(&self, rows: Rc<Vec<usize>>) -> Result<Var<S>> {
        let v = self.value();
        if v.rank() != 2 {
            return Err(Error::shape("select_rows needs a matrix"));
        }
        if let Some(&bad) = rows.iter().find(|&&r| r >= v.rows()) {
            return Err(Error::structure(format!("row {bad} out of {} rows", v.rows())));
        }
        let out = v.select_rows(&rows);
        Ok(self.tape.push(out, Op::SelectRows(self.idx, rows), self.requires_grad()))
    }

    /// Horizontal concatenation of two matrices with equal row counts.
    pub fn concat_cols(&self, other: &Var<S>) -> Result<Var<S>> {
        let (a, b) = self.pair_values(other)?;
        if a.rank() != 2 || b.rank() != 2 || a.rows() != b.rows() {
            return Err(Error::shape(format!(
                "concat_cols {:?} | {:?}",
                a.shape(),
                b.shape()
            )));
        }
        let rows = a.rows();
        let (ca, cb) = (a.cols(), b.cols());
        let mut data = Vec::with_capacity(rows * (ca + cb));
        for r in 0..rows {
            data.extend_from_slice(a.row(r));
            data.extend_from_slice(b.row(r));
        }
        let out = Tensor::matrix(rows, ca + cb, data)?;
        let rg = self.requires_grad() || other.requires_grad();
        Ok(self.tape.push(out, Op::ConcatCols(self.idx, other.idx), rg))
    }

    pub fn sum(&self) -> Var<S> {
        let out = Tensor::scalar(self.with_value(|v| v.sum()));
        self.tape.push(out, Op::Sum(self.idx), self.requires_grad())
    }

    pub fn mean(&self) -> Var<S> {
        let (total, len) = self.with_value(|v| (v.sum(), v.len()));
        let out = Tensor::scalar(total / S::of(len.max(1) as f64));
        self.tape.push(out, Op::Mean(self.idx), self.requires_grad())
    }

    /// Row sums of a matrix, as a vector.
    pub fn sum_rows(&self) -> Result<Var<S>> {
        let v = self.value();
        if v.rank() != 2 {
            return Err(Error::shape("sum_rows needs a matrix"));
        }
        let out = Tensor::vector((0..v.rows()).map(|r| {
            let mut acc = S::zero();
            for &x in v.row(r) {
                acc += x;
            }
            acc
        }).collect());
        Ok(self.tape.push(out, Op::SumRows(self.idx), self.requires_grad()))
    }

    /// Subtract each column's mean (matrix centering for CKA-style terms).
    pub fn center_cols(&self) -> Result<Var<S>> {
        let v = self.value();
        if v.rank() != 2 {
            return Err(Error::shape("center_cols needs a matrix"));
        }
        let out = v.centered_cols();
        Ok(self.tape.push(out, Op::CenterCols(self.idx), self.requires_grad()))
    }

    /// Per-row dot products against a block of `block` key rows:
    /// out[b,k] = dot(self[b], keys[b*block + k]).
    pub fn row_block_dot(&self, keys: &Var<S>, block: usize) -> Result<Var<S>> {
        let (q, kv) = self.pair_values(keys)?;
        if q.rank() != 2 || kv.rank() != 2 || q.cols() != kv.cols()
            || kv.rows() != q.rows() * block
        {
            return Err(Error::shape(format!(
                "row_block_dot {:?} against {:?} with block {block}",
                q.shape(),
                kv.shape()
            )));
        }
        let rows = q.rows();
        let mut out = Vec::with_capacity(rows * block);
        for b in 0..rows {
            for k in 0..block {
                out.push(dot_slices(q.row(b), kv.row(b * block + k)));
            }
        }
        let out = Tensor::matrix(rows, block, out)?;
        let rg = self.requires_grad() || keys.requires_grad();
        Ok(self.tape.push(out, Op::RowBlockDot { q: self.idx, keys: keys.idx, block }, rg))
    }

    /// Per-row weighted sum over a block of `block` value rows:
    /// out[b] = sum_k self[b,k] * vals[b*block + k].
    pub fn row_block_mix(&self, vals: &Var<S>, block: usize) -> Result<Var<S>> {
        let (w, vv) = self.pair_values(vals)?;
        if w.rank() != 2 || vv.rank() != 2 || w.cols() != block
            || vv.rows() != w.rows() * block
        {
            return Err(Error::shape(format!(
                "row_block_mix {:?} over {:?} with block {block}",
                w.shape(),
                vv.shape()
            )));
        }
        let rows = w.rows();
        let dv = vv.cols();
        let mut out = Tensor::zeros(&[rows, dv]);
        for b in 0..rows {
            for k in 0..block {
                let coeff = w.get(b, k);
                let src = vv.row(b * block + k);
                let dst = out.row_mut(b);
                for (o, &x) in dst.iter_mut().zip(src) {
                    *o = *o + coeff * x;
                }
            }
        }
        let rg = self.requires_grad() || vals.requires_grad();
        Ok(self.tape.push(out, Op::RowBlockMix { w: self.idx, vals: vals.idx, block }, rg))
    }

    pub fn reshape(&self, shape: Vec<usize>) -> Result<Var<S>> {
        let out = self.value().reshaped(shape)?;
        Ok(self.tape.push(out, Op::Reshape(self.idx), self.requires_grad()))
    }

    /// Backpropagate from this scalar node through the whole tape.
    pub fn backward(&self) -> Result<Gradients<S>> {
        let inner = self.tape.inner.borrow();
        let nodes = &inner.nodes;
        if nodes[self.idx].value.len() != 1 {
            return Err(Error::structure("backward target must be a scalar node"));
        }
        validate_topology(nodes, self.idx)?;
        let mut grads: Vec<Option<Tensor<S>>> = (0..nodes.len()).map(|_| None).collect();
        if !nodes[self.idx].requires_grad {
            return Ok(Gradients { grads });
        }
        grads[self.idx] = Some(Tensor::scalar(S::one()));

        for idx in (0..=self.idx).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &nodes[idx];
            if !node.requires_grad {
                continue;
            }
            backward_step(nodes, &mut grads, idx, &g, &node.op);
            if matches!(node.op, Op::Leaf) {
                grads[idx] = Some(g);
            }
        }
        Ok(Gradients { grads })
    }
}

/// Every node must only consume earlier nodes; violated only if the tape is
/// manipulated out of band, but checked before every backward pass.
fn validate_topology<S: Scalar>(nodes: &[Node<S>], upto: usize) -> Result<()> {
    for (idx, node) in nodes.iter().enumerate().take(upto + 1) {
        let ok = op_inputs(&node.op).iter().all(|&i| i < idx);
        if !ok {
            return Err(Error::structure(format!("node {idx} consumes a later node (cycle)")));
        }
    }
    Ok(())
}

fn op_inputs(op: &Op) -> Vec<usize> {
    match op {
        Op::Leaf => vec![],
        Op::Add(a, b)
        | Op::AddBias(a, b)
        | Op::Sub(a, b)
        | Op::Mul(a, b)
        | Op::Div(a, b)
        | Op::MatMul(a, b)
        | Op::Minimum(a, b)
        | Op::CosineSim(a, b)
        | Op::ConcatCols(a, b) => vec![*a, *b],
        Op::RowBlockDot { q, keys, .. } => vec![*q, *keys],
        Op::RowBlockMix { w, vals, .. } => vec![*w, *vals],
        Op::Neg(a)
        | Op::Scale(a, _)
        | Op::AddScalar(a)
        | Op::Transpose(a)
        | Op::Relu(a)
        | Op::Log(a)
        | Op::Exp(a)
        | Op::Sqrt(a)
        | Op::Clamp(a, _, _)
        | Op::SoftmaxRows(a, _)
        | Op::MaskedLogSoftmaxRows(a, _)
        | Op::L2NormalizeRows { x: a, .. }
        | Op::GatherRows(a, _)
        | Op::SelectRows(a, _)
        | Op::Sum(a)
        | Op::Mean(a)
        | Op::SumRows(a)
        | Op::CenterCols(a)
        | Op::Reshape(a) => vec![*a],
    }
}

fn accumulate<S: Scalar>(
    nodes: &[Node<S>],
    grads: &mut [Option<Tensor<S>>],
    target: usize,
    delta: Tensor<S>,
) {
    if !nodes[target].requires_grad {
        return;
    }
    match &mut grads[target] {
        Some(existing) => {
            existing.axpy(S::one(), &delta).expect("gradient shape mismatch");
        }
        slot @ None => *slot = Some(delta),
    }
}

#[allow(clippy::too_many_lines)]
fn backward_step<S: Scalar>(
    nodes: &[Node<S>],
    grads: &mut [Option<Tensor<S>>],
    idx: usize,
    g: &Tensor<S>,
    op: &Op,
) {
    let value = |i: usize| &nodes[i].value;
    match op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            accumulate(nodes, grads, *a, g.clone());
            accumulate(nodes, grads, *b, g.clone());
        }
        Op::AddBias(a, b) => {
            accumulate(nodes, grads, *a, g.clone());
            if nodes[*b].requires_grad {
                let cols = value(*b).len();
                let mut db = vec![S::zero(); cols];
                for (i, &gv) in g.data().iter().enumerate() {
                    db[i % cols] += gv;
                }
                accumulate(nodes, grads, *b, Tensor::vector(db));
            }
        }
        Op::Sub(a, b) => {
            accumulate(nodes, grads, *a, g.clone());
            accumulate(nodes, grads, *b, g.map(|v| -v));
        }
        Op::Mul(a, b) => {
            if nodes[*a].requires_grad {
                accumulate(nodes, grads, *a, g.zip(value(*b), |gv, bv| gv * bv).unwrap());
            }
            if nodes[*b].requires_grad {
                accumulate(nodes, grads, *b, g.zip(value(*a), |gv, av| gv * av).unwrap());
            }
        }
        Op::Div(a, b) => {
            if nodes[*a].requires_grad {
                accumulate(nodes, grads, *a, g.zip(value(*b), |gv, bv| gv / bv).unwrap());
            }
            if nodes[*b].requires_grad {
                let y = &nodes[idx].value;
                let mut db = g.zip(y, |gv, yv| gv * yv).unwrap();
                db = db.zip(value(*b), |x, bv| -(x / bv)).unwrap();
                accumulate(nodes, grads, *b, db);
            }
        }
        Op::Neg(a) => accumulate(nodes, grads, *a, g.map(|v| -v)),
        Op::Scale(a, k) => accumulate(nodes, grads, *a, g.map(|v| v * S::of(*k))),
        Op::AddScalar(a) => accumulate(nodes, grads, *a, g.clone()),
        Op::MatMul(a, b) => {
            let (av, bv) = (value(*a), value(*b));
            let (m, k) = (av.shape()[0], av.shape()[1]);
            let n = bv.shape()[1];
            if nodes[*a].requires_grad {
                let mut da = Tensor::zeros(&[m, k]);
                matmul_bt_into(g.data(), bv.data(), da.data_mut(), m, n, k);
                accumulate(nodes, grads, *a, da);
            }
            if nodes[*b].requires_grad {
                let mut db = Tensor::zeros(&[k, n]);
                matmul_at_into(av.data(), g.data(), db.data_mut(), m, k, n);
                accumulate(nodes, grads, *b, db);
            }
        }
        Op::Transpose(a) => accumulate(nodes, grads, *a, g.transpose()),
        Op::Relu(a) => {
            let da = g.zip(value(*a), |gv, xv| if xv > S::zero() { gv } else { S::zero() }).unwrap();
            accumulate(nodes, grads, *a, da);
        }
        Op::Log(a) => {
            accumulate(nodes, grads, *a, g.zip(value(*a), |gv, xv| gv / xv).unwrap());
        }
        Op::Exp(a) => {
            accumulate(nodes, grads, *a, g.zip(&nodes[idx].value, |gv, yv| gv * yv).unwrap());
        }
        Op::Sqrt(a) => {
            let half = S::of(0.5);
            let da = g.zip(&nodes[idx].value, |gv, yv| gv * half / yv).unwrap();
            accumulate(nodes, grads, *a, da);
        }
        Op::Clamp(a, lo, hi) => {
            let (lo, hi) = (S::of(*lo), S::of(*hi));
            let da = g
                .zip(value(*a), |gv, xv| if xv > lo && xv < hi { gv } else { S::zero() })
                .unwrap();
            accumulate(nodes, grads, *a, da);
        }
        Op::Minimum(a, b) => {
            let (av, bv) = (value(*a), value(*b));
            if nodes[*a].requires_grad {
                let mut da = g.clone();
                for ((d, &x), &y) in da.data_mut().iter_mut().zip(av.data()).zip(bv.data()) {
                    if x > y {
                        *d = S::zero();
                    }
                }
                accumulate(nodes, grads, *a, da);
            }
            if nodes[*b].requires_grad {
                let mut db = g.clone();
                for ((d, &x), &y) in db.data_mut().iter_mut().zip(av.data()).zip(bv.data()) {
                    if x <= y {
                        *d = S::zero();
                    }
                }
                accumulate(nodes, grads, *b, db);
            }
        }
        Op::SoftmaxRows(a, temp) => {
            let y = &nodes[idx].value;
            let inv_t = S::one() / S::of(*temp);
            let rows = y.rows();
            let mut da = Tensor::zeros(y.shape());
            for r in 0..rows {
                let yr = y.row(r);
                let gr = g.row(r);
                let inner = dot_slices(gr, yr);
                let dr = da.row_mut(r);
                for ((d, &yv), &gv) in dr.iter_mut().zip(yr).zip(gr) {
                    *d = inv_t * yv * (gv - inner);
                }
            }
            accumulate(nodes, grads, *a, da);
        }
        Op::MaskedLogSoftmaxRows(a, mask) => {
            let y = &nodes[idx].value;
            let rows = y.rows();
            let cols = y.cols();
            let mut da = Tensor::zeros(y.shape());
            for r in 0..rows {
                let base = r * cols;
                let row_mask = &mask[base..base + cols];
                let yr = y.row(r);
                let gr = g.row(r);
                let mut gsum = S::zero();
                for (&gv, &keep) in gr.iter().zip(row_mask) {
                    if keep {
                        gsum += gv;
                    }
                }
                let dr = &mut da.data_mut()[base..base + cols];
                for i in 0..cols {
                    if row_mask[i] {
                        dr[i] = gr[i] - yr[i].exp() * gsum;
                    }
                }
            }
            accumulate(nodes, grads, *a, da);
        }
        Op::L2NormalizeRows { x, guarded, norms } => {
            let y = &nodes[idx].value;
            let rows = y.rows();
            let eps = S::of(NORM_EPS);
            let mut da = Tensor::zeros(y.shape());
            for r in 0..rows {
                let yr = y.row(r);
                let gr = g.row(r);
                let mut norm = S::of(norms[r]);
                if *guarded && norm < eps {
                    norm = eps;
                }
                let inner = dot_slices(gr, yr);
                let dr = da.row_mut(r);
                for ((d, &gv), &yv) in dr.iter_mut().zip(gr).zip(yr) {
                    *d = (gv - inner * yv) / norm;
                }
            }
            accumulate(nodes, grads, *x, da);
        }
        Op::CosineSim(a, b) => {
            let (av, bv) = (value(*a), value(*b));
            let gv = g.value();
            let na = av.norm();
            let nb = bv.norm();
            let y = nodes[idx].value.value();
            if nodes[*a].requires_grad {
                let mut da = av.clone();
                for ((d, &x), &yv2) in da.data_mut().iter_mut().zip(av.data()).zip(bv.data()) {
                    *d = gv * (yv2 / (na * nb) - y * x / (na * na));
                }
                accumulate(nodes, grads, *a, da);
            }
            if nodes[*b].requires_grad {
                let mut db = bv.clone();
                for ((d, &x), &yv2) in db.data_mut().iter_mut().zip(bv.data()).zip(av.data()) {
                    *d = gv * (yv2 / (na * nb) - y * x / (nb * nb));
                }
                accumulate(nodes, grads, *b, db);
            }
        }
        Op::GatherRows(a, idx_list) => {
            let xv = value(*a);
            let mut da = Tensor::zeros(xv.shape());
            for (r, (&c, &gv)) in idx_list.iter().zip(g.data()).enumerate() {
                da.set(r, c, gv);
            }
            accumulate(nodes, grads, *a, da);
        }
        Op::SelectRows(a, rows) => {
            let xv = value(*a);
            let mut da = Tensor::zeros(xv.shape());
            for (out_row, &src_row) in rows.iter().enumerate() {
                for (d, &gv) in da.row_mut(src_row).iter_mut().zip(g.row(out_row)) {
                    *d = *d + gv;
                }
            }
            accumulate(nodes, grads, *a, da);
        }
        Op::ConcatCols(a, b) => {
            let ca = value(*a).cols();
            let cb = value(*b).cols();
            let rows = g.rows();
            if nodes[*a].requires_grad {
                let mut da = Tensor::zeros(&[rows, ca]);
                for r in 0..rows {
                    da.row_mut(r).copy_from_slice(&g.row(r)[..ca]);
                }
                accumulate(nodes, grads, *a, da);
            }
            if nodes[*b].requires_grad {
                let mut db = Tensor::zeros(&[rows, cb]);
                for r in 0..rows {
                    db.row_mut(r).copy_from_slice(&g.row(r)[ca..]);
                }
                accumulate(nodes, grads, *b, db);
            }
        }
        Op::Sum(a) => {
            let gv = g.value();
            accumulate(nodes, grads, *a, value(*a).map(|_| gv));
        }
        Op::Mean(a) => {
            let n = value(*a).len().max(1);
            let gv = g.value() / S::of(n as f64);
            accumulate(nodes, grads, *a, value(*a).map(|_| gv));
        }
        Op::SumRows(a) => {
            let xv = value(*a);
            let mut da = Tensor::zeros(xv.shape());
            for r in 0..xv.rows() {
                let gv = g.data()[r];
                for v in da.row_mut(r) {
                    *v = gv;
                }
            }
            accumulate(nodes, grads, *a, da);
        }
        Op::CenterCols(a) => {
            accumulate(nodes, grads, *a, g.centered_cols());
        }
        Op::RowBlockDot { q, keys, block } => {
            let (qv, kv) = (value(*q), value(*keys));
            let rows = qv.rows();
            let d = qv.cols();
            if nodes[*q].requires_grad {
                let mut dq = Tensor::zeros(&[rows, d]);
                for b in 0..rows {
                    for k in 0..*block {
                        let gv = g.get(b, k);
                        let src = kv.row(b * block + k);
                        for (o, &x) in dq.row_mut(b).iter_mut().zip(src) {
                            *o = *o + gv * x;
                        }
                    }
                }
                accumulate(nodes, grads, *q, dq);
            }
            if nodes[*keys].requires_grad {
                let mut dk = Tensor::zeros(&[rows * block, d]);
                for b in 0..rows {
                    for k in 0..*block {
                        let gv = g.get(b, k);
                        let src = qv.row(b);
                        for (o, &x) in dk.row_mut(b * block + k).iter_mut().zip(src) {
                            *o = *o + gv * x;
                        }
                    }
                }
                accumulate(nodes, grads, *keys, dk);
            }
        }
        Op::RowBlockMix { w, vals, block } => {
            let (wv, vv) = (value(*w), value(*vals));
            let rows = wv.rows();
            let dv = vv.cols();
            if nodes[*w].requires_grad {
                let mut dw = Tensor::zeros(&[rows, *block]);
                for b in 0..rows {
                    for k in 0..*block {
                        dw.set(b, k, dot_slices(g.row(b), vv.row(b * block + k)));
                    }
                }
                accumulate(nodes, grads, *w, dw);
            }
            if nodes[*vals].requires_grad {
                let mut dvals = Tensor::zeros(&[rows * block, dv]);
                for b in 0..rows {
                    for k in 0..*block {
                        let coeff = wv.get(b, k);
                        for (o, &x) in dvals.row_mut(b * block + k).iter_mut().zip(g.row(b)) {
                            *o = *o + coeff * x;
                        }
                    }
                }
                accumulate(nodes, grads, *vals, dvals);
            }
        }
        Op::Reshape(a) => {
            let shape = value(*a).shape().to_vec();
            accumulate(nodes, grads, *a, g.clone().reshaped(shape).unwrap());
        }
    }
}

/// In-place temperature softmax with max subtraction.
pub fn softmax_slice<S: Scalar>(row: &mut [S], temperature: S) {
    let max = row.iter().copied().fold(S::neg_infinity(), S::max);
    let mut total = S::zero();
    for v in row.iter_mut() {
        *v = ((*v - max) / temperature).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v = *v / total;
    }
}

/// In-place masked log-softmax; masked entries become [`MASKED_LOG`].
pub fn log_softmax_slice_masked<S: Scalar>(row: &mut [S], mask: &[bool]) {
    let mut max = S::neg_infinity();
    for (v, &keep) in row.iter().zip(mask) {
        if keep && *v > max {
            max = *v;
        }
    }
    let mut total = S::zero();
    for (v, &keep) in row.iter().zip(mask) {
        if keep {
            total += (*v - max).exp();
        }
    }
    let lse = max + total.ln();
    for (v, &keep) in row.iter_mut().zip(mask) {
        *v = if keep { *v - lse } else { S::of(MASKED_LOG) };
    }
}
