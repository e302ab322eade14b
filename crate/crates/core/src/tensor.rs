//! Dense row-major tensors and the numeric kernels everything else runs on.
//!
//! Shapes are kept deliberately small: rank 0 (scalars), rank 1 (vectors)
//! and rank 2 (matrices) cover the whole pipeline. Kernels accumulate an
//! approximate multiply-add count in a thread-local counter so scaling
//! behaviour can be asserted in tests without timing anything.

use std::cell::Cell;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

thread_local! {
    static FLOP_COUNT: Cell<u64> = const { Cell::new(0) };
}

/// Approximate floating-point operations performed by kernels on this thread.
pub fn flop_count() -> u64 {
    FLOP_COUNT.with(|c| c.get())
}

/// Reset the thread-local flop counter.
pub fn reset_flop_count() {
    FLOP_COUNT.with(|c| c.set(0));
}

#[inline]
fn count_flops(n: u64) {
    FLOP_COUNT.with(|c| c.set(c.get().wrapping_add(n)));
}

/// Dense tensor of rank 0, 1 or 2.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<S> {
    shape: Vec<usize>,
    data: Vec<S>,
}

impl<S: Scalar> Tensor<S> {
    /// Rank-0 tensor holding a single value.
    pub fn scalar(value: S) -> Self {
        Tensor { shape: vec![], data: vec![value] }
    }

    /// Rank-1 tensor from a value vector.
    pub fn vector(data: Vec<S>) -> Self {
        Tensor { shape: vec![data.len()], data }
    }

    /// Rank-2 tensor from row-major data.
    pub fn matrix(rows: usize, cols: usize, data: Vec<S>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape(format!(
                "matrix {rows}x{cols} needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Tensor { shape: vec![rows, cols], data })
    }

    pub fn from_shape(shape: Vec<usize>, data: Vec<S>) -> Result<Self> {
        let expect: usize = shape.iter().product();
        if data.len() != expect {
            return Err(Error::shape(format!(
                "shape {shape:?} needs {expect} values, got {}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let len = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![S::zero(); len] }
    }

    pub fn full(shape: &[usize], value: S) -> Self {
        let len = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![value; len] }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Number of rows when viewed as a matrix (scalars/vectors are one row).
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            2 => self.shape[0],
            _ => 1,
        }
    }

    /// Number of columns when viewed as a matrix.
    pub fn cols(&self) -> usize {
        match self.shape.len() {
            2 => self.shape[1],
            1 => self.shape[0],
            _ => 1,
        }
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<S> {
        self.data
    }

    /// The single value of a rank-0 or length-1 tensor.
    pub fn value(&self) -> S {
        debug_assert_eq!(self.data.len(), 1, "value() on non-scalar tensor");
        self.data[0]
    }

    pub fn get(&self, r: usize, c: usize) -> S {
        debug_assert_eq!(self.rank(), 2);
        self.data[r * self.shape[1] + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: S) {
        debug_assert_eq!(self.rank(), 2);
        let cols = self.shape[1];
        self.data[r * cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[S] {
        let cols = self.cols();
        &self.data[r * cols..(r + 1) * cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [S] {
        let cols = self.cols();
        &mut self.data[r * cols..(r + 1) * cols]
    }

    /// Copy of the given rows, in order, as a new matrix.
    pub fn select_rows(&self, idx: &[usize]) -> Tensor<S> {
        let cols = self.cols();
        let mut data = Vec::with_capacity(idx.len() * cols);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Tensor { shape: vec![idx.len(), cols], data }
    }

    pub fn reshaped(mut self, shape: Vec<usize>) -> Result<Tensor<S>> {
        let expect: usize = shape.iter().product();
        if expect != self.data.len() {
            return Err(Error::shape(format!(
                "cannot reshape {} values into {shape:?}",
                self.data.len()
            )));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(S) -> S) -> Tensor<S> {
        count_flops(self.data.len() as u64);
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    /// Elementwise combination of two same-shape tensors.
    pub fn zip(&self, other: &Tensor<S>, f: impl Fn(S, S) -> S) -> Result<Tensor<S>> {
        if self.shape != other.shape {
            return Err(Error::shape(format!(
                "elementwise op on {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        count_flops(self.data.len() as u64);
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
        Ok(Tensor { shape: self.shape.clone(), data })
    }

    /// self += alpha * other, in place.
    pub fn axpy(&mut self, alpha: S, other: &Tensor<S>) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::shape(format!(
                "axpy on {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        count_flops(2 * self.data.len() as u64);
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + alpha * b;
        }
        Ok(())
    }

    pub fn scale_in_place(&mut self, alpha: S) {
        count_flops(self.data.len() as u64);
        for v in &mut self.data {
            *v = *v * alpha;
        }
    }

    pub fn sum(&self) -> S {
        count_flops(self.data.len() as u64);
        self.data.iter().copied().sum()
    }

    pub fn dot(&self, other: &Tensor<S>) -> Result<S> {
        if self.shape != other.shape {
            return Err(Error::shape("dot on mismatched shapes".to_string()));
        }
        count_flops(2 * self.data.len() as u64);
        Ok(dot_slices(&self.data, &other.data))
    }

    pub fn norm(&self) -> S {
        count_flops(2 * self.data.len() as u64);
        dot_slices(&self.data, &self.data).sqrt()
    }

    pub fn transpose(&self) -> Tensor<S> {
        debug_assert_eq!(self.rank(), 2, "transpose needs a matrix");
        let (m, n) = (self.shape[0], self.shape[1]);
        let mut out = vec![S::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = self.data[i * n + j];
            }
        }
        Tensor { shape: vec![n, m], data: out }
    }

    /// Matrix product self[m,k] * other[k,n].
    pub fn matmul(&self, other: &Tensor<S>) -> Result<Tensor<S>> {
        if self.rank() != 2 || other.rank() != 2 {
            return Err(Error::shape("matmul needs rank-2 operands".to_string()));
        }
        let (m, k) = (self.shape[0], self.shape[1]);
        let (k2, n) = (other.shape[0], other.shape[1]);
        if k != k2 {
            return Err(Error::shape(format!(
                "matmul {:?} x {:?}: inner dims differ",
                self.shape, other.shape
            )));
        }
        let mut out = Tensor::zeros(&[m, n]);
        matmul_into(&self.data, &other.data, &mut out.data, m, k, n);
        Ok(out)
    }

    /// L2-normalize each row; rows with norm below `eps` are divided by `eps`.
    /// Returns the per-row norms alongside the normalized tensor.
    pub fn l2_normalized_rows(&self, eps: S) -> (Tensor<S>, Vec<S>) {
        let rows = self.rows();
        let cols = self.cols();
        let mut out = self.clone();
        let mut norms = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = &mut out.data[r * cols..(r + 1) * cols];
            let n = dot_slices(row, row).sqrt();
            let denom = if n < eps { eps } else { n };
            let inv = S::one() / denom;
            for v in row.iter_mut() {
                *v = *v * inv;
            }
            norms.push(n);
        }
        count_flops(3 * self.data.len() as u64);
        (out, norms)
    }

    /// Mean of each column (matrix input).
    pub fn col_means(&self) -> Vec<S> {
        let rows = self.rows();
        let cols = self.cols();
        let mut means = vec![S::zero(); cols];
        for r in 0..rows {
            for (m, &v) in means.iter_mut().zip(self.row(r)) {
                *m += v;
            }
        }
        let inv = S::one() / S::of(rows as f64);
        for m in &mut means {
            *m = *m * inv;
        }
        count_flops(self.data.len() as u64);
        means
    }

    /// Subtract the column mean from every entry (centers each column).
    pub fn centered_cols(&self) -> Tensor<S> {
        let means = self.col_means();
        let cols = self.cols();
        let mut out = self.clone();
        for (i, v) in out.data.iter_mut().enumerate() {
            *v = *v - means[i % cols];
        }
        count_flops(self.data.len() as u64);
        out
    }

    /// Convert every entry to f64 (for serialization and reports).
    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.to_f64_lossy()).collect()
    }

    pub fn from_f64(shape: Vec<usize>, data: &[f64]) -> Result<Tensor<S>> {
        Tensor::from_shape(shape, data.iter().map(|&v| S::of(v)).collect())
    }
}

#[inline]
pub(crate) fn dot_slices<S: Scalar>(a: &[S], b: &[S]) -> S {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = S::zero();
    for (&x, &y) in a.iter().zip(b) {
        acc = acc + x * y;
    }
    acc
}

/// out[m,n] += a[m,k] * b[k,n], row-major. The i-k-j loop order keeps the
/// inner loop a contiguous axpy over rows of `b`, which vectorizes without
/// reordering any accumulation (results stay deterministic).
pub(crate) fn matmul_into<S: Scalar>(a: &[S], b: &[S], out: &mut [S], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    count_flops(2 * (m * k * n) as u64);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let out_row = &mut out[i * n..(i + 1) * n];
        for (p, &a_ip) in a_row.iter().enumerate() {
            if a_ip == S::zero() {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o = *o + a_ip * bv;
            }
        }
    }
}

/// out[m,n] += a[m,k] * b^T where b is [n,k]. Both inner loops run over
/// contiguous memory, so this is preferred when the right operand is
/// naturally stored transposed.
pub(crate) fn matmul_bt_into<S: Scalar>(a: &[S], b: &[S], out: &mut [S], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(out.len(), m * n);
    count_flops(2 * (m * k * n) as u64);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let b_row = &b[j * k..(j + 1) * k];
            out[i * n + j] = out[i * n + j] + dot_slices(a_row, b_row);
        }
    }
}

/// out[k,n] += a^T * g where a is [m,k] and g is [m,n]. Outer-product
/// accumulation with a contiguous inner loop.
pub(crate) fn matmul_at_into<S: Scalar>(a: &[S], g: &[S], out: &mut [S], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(g.len(), m * n);
    debug_assert_eq!(out.len(), k * n);
    count_flops(2 * (m * k * n) as u64);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let g_row = &g[i * n..(i + 1) * n];
        for (p, &a_ip) in a_row.iter().enumerate() {
            if a_ip == S::zero() {
                continue;
            }
            let out_row = &mut out[p * n..(p + 1) * n];
            for (o, &gv) in out_row.iter_mut().zip(g_row) {
                *o = *o + a_ip * gv;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_product_invariant() {
        assert!(Tensor::<f64>::matrix(2, 3, vec![0.0; 5]).is_err());
        let t = Tensor::<f64>::matrix(2, 3, vec![1.0; 6]).unwrap();
        assert_eq!(t.len(), 6);
        assert_eq!(t.shape(), &[2, 3]);
    }

    #[test]
    fn matmul_small_oracle() {
        let a = Tensor::matrix(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let b = Tensor::matrix(3, 2, vec![7.0, 8.0, 9.0, 10.0, 11.0, 12.0]).unwrap();
        let c = a.matmul(&b).unwrap();
        assert_eq!(c.data(), &[58.0, 64.0, 139.0, 154.0]);
    }

    #[test]
    fn matmul_bt_matches_matmul() {
        let a = Tensor::matrix(2, 3, vec![1.0, -2.0, 3.0, 0.5, 5.0, -6.0]).unwrap();
        let b = Tensor::matrix(3, 4, (0..12).map(|i| i as f64 * 0.3 - 1.0).collect()).unwrap();
        let expect = a.matmul(&b).unwrap();
        let bt = b.transpose();
        let mut out = Tensor::zeros(&[2, 4]);
        matmul_bt_into(a.data(), bt.data(), out.data_mut(), 2, 3, 4);
        for (x, y) in out.data().iter().zip(expect.data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn normalize_rows() {
        let t = Tensor::<f64>::matrix(2, 2, vec![3.0, 4.0, 0.0, 2.0]).unwrap();
        let (n, norms) = t.l2_normalized_rows(1e-8);
        assert!((n.get(0, 0) - 0.6).abs() < 1e-12);
        assert!((n.get(0, 1) - 0.8).abs() < 1e-12);
        assert!((norms[0] - 5.0).abs() < 1e-12);
        assert!((n.get(1, 1) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn centered_cols_zero_mean() {
        let t = Tensor::<f64>::matrix(3, 2, vec![1.0, 10.0, 2.0, 20.0, 3.0, 30.0]).unwrap();
        let c = t.centered_cols();
        let means = c.col_means();
        assert!(means.iter().all(|m| m.abs() < 1e-12));
    }

    #[test]
    fn flop_counter_scales_with_matmul() {
        reset_flop_count();
        let a = Tensor::<f64>::zeros(&[4, 8]);
        let b = Tensor::<f64>::zeros(&[8, 2]);
        let _ = a.matmul(&b).unwrap();
        assert_eq!(flop_count(), 2 * 4 * 8 * 2);
    }

    #[test]
    fn generic_over_f32() {
        let a = Tensor::<f32>::matrix(1, 2, vec![3.0, 4.0]).unwrap();
        assert!((a.norm() - 5.0).abs() < 1e-6);
    }
}
