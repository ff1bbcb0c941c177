//! Dense row-major tensors and the handful of kernels the model needs.
//!
//! Storage is a flat `Vec` plus an explicit shape. There are no strided views:
//! every operation that changes layout produces a new tensor. Reductions
//! (dot products, sums, softmax normalizers) accumulate in `f64` whatever the
//! element type.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    /// Wraps `data` with `shape`, rejecting a length mismatch.
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<T>) -> Result<Self> {
        let shape = shape.into();
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::shape("tensor data length", &shape, &[data.len()]));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::filled(shape, T::zero())
    }

    pub fn filled(shape: impl Into<Vec<usize>>, value: T) -> Self {
        let shape = shape.into();
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![value; n],
        }
    }

    pub fn from_fn(shape: impl Into<Vec<usize>>, mut f: impl FnMut(usize) -> T) -> Self {
        let shape = shape.into();
        let n = shape.iter().product();
        Self {
            shape,
            data: (0..n).map(&mut f).collect(),
        }
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

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub(crate) fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    /// Row-major flat offset of a multi-index.
    pub fn offset(&self, index: &[usize]) -> Result<usize> {
        if index.len() != self.shape.len() || index.iter().zip(&self.shape).any(|(i, n)| i >= n) {
            return Err(Error::shape("index out of bounds", index, &self.shape));
        }
        Ok(index.iter().zip(&self.shape).fold(0, |acc, (&i, &n)| acc * n + i))
    }

    pub fn get(&self, index: &[usize]) -> Result<T> {
        Ok(self.data[self.offset(index)?])
    }

    pub fn reshape(self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        Self::new(shape, self.data)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn scale(&self, k: T) -> Self {
        self.map(|v| v * k)
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::narrow(v.widen())).collect(),
        }
    }

    /// Index of the first NaN or infinity, if any.
    pub fn first_non_finite(&self) -> Option<usize> {
        self.data.iter().position(|v| !v.is_finite())
    }

    pub fn ensure_finite(&self) -> Result<()> {
        match self.first_non_finite() {
            Some(index) => Err(Error::NonFinite { index }),
            None => Ok(()),
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().map(|v| v.widen()).sum()
    }

    pub fn max_abs_diff(&self, other: &Self) -> Result<f64> {
        if self.shape != other.shape {
            return Err(Error::shape("max_abs_diff", &self.shape, &other.shape));
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.widen() - b.widen()).abs())
            .fold(0.0, f64::max))
    }

    /// Two-dimensional matrix product.
    pub fn matmul(&self, rhs: &Self) -> Result<Self> {
        if self.rank() != 2 || rhs.rank() != 2 || self.shape[1] != rhs.shape[0] {
            return Err(Error::shape("matmul", &self.shape, &rhs.shape));
        }
        let (m, k, n) = (self.shape[0], self.shape[1], rhs.shape[1]);
        let mut out = vec![T::zero(); m * n];
        matmul_into(&self.data, &rhs.data, &mut out, m, k, n);
        Self::new([m, n], out)
    }

    pub fn transpose(&self) -> Result<Self> {
        if self.rank() != 2 {
            return Err(Error::shape("transpose needs rank 2", &self.shape, &[2]));
        }
        let (r, c) = (self.shape[0], self.shape[1]);
        let mut out = Vec::with_capacity(r * c);
        for j in 0..c {
            for i in 0..r {
                out.push(self.data[i * c + j]);
            }
        }
        Self::new([c, r], out)
    }
}

/// Softmax along the last axis, with max subtraction.
pub fn softmax_last_axis<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    if x.rank() == 0 {
        return Err(Error::Invalid("softmax needs rank >= 1".into()));
    }
    x.ensure_finite()?;
    let width = *x.shape().last().unwrap();
    let mut data = x.data().to_vec();
    if width > 0 {
        for row in data.chunks_mut(width) {
            softmax_in_place(row);
        }
    }
    Tensor::new(x.shape().to_vec(), data)
}

/// Normalizes one row in place. The row must be finite.
///
/// Exponentials are taken in the working precision; the normalizer is
/// accumulated in `f64`.
#[inline]
pub(crate) fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let max = row.iter().fold(T::neg_infinity(), |m, &v| if v > m { v } else { m });
    let mut total = 0.0f64;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += v.widen();
    }
    let inv = 1.0 / total;
    for v in row.iter_mut() {
        *v = T::narrow(v.widen() * inv);
    }
}

/// A strided read-only matrix view: entry `(i, j)` is `data[i·rs + j·cs]`.
#[derive(Debug, Clone, Copy)]
pub(crate) struct View<'a, T> {
    data: &'a [T],
    rows: usize,
    cols: usize,
    rs: usize,
    cs: usize,
}

impl<'a, T> View<'a, T> {
    pub fn new(data: &'a [T], rows: usize, cols: usize, rs: usize, cs: usize) -> Self {
        assert!(fits(data.len(), rows, cols, rs, cs), "view {rows}×{cols} out of bounds");
        Self {
            data,
            rows,
            cols,
            rs,
            cs,
        }
    }

    /// Dense row-major `rows × cols`.
    pub fn rows(data: &'a [T], rows: usize, cols: usize) -> Self {
        Self::new(data, rows, cols, cols, 1)
    }

    pub fn t(self) -> Self {
        Self {
            rows: self.cols,
            cols: self.rows,
            rs: self.cs,
            cs: self.rs,
            ..self
        }
    }
}

fn fits(len: usize, rows: usize, cols: usize, rs: usize, cs: usize) -> bool {
    rows == 0 || cols == 0 || (rows - 1) * rs + (cols - 1) * cs < len
}

/// `c ← alpha·a·b + beta·c`, with `c` row-major at row stride `rsc`.
/// With `beta = 0` the old contents of `c` are ignored.
pub(crate) fn gemm<T: Scalar>(alpha: T, a: View<'_, T>, b: View<'_, T>, beta: T, c: &mut [T], rsc: usize) {
    assert_eq!(a.cols, b.rows, "gemm inner dimensions");
    let (m, k, n) = (a.rows, a.cols, b.cols);
    assert!(fits(c.len(), m, n, rsc, 1), "gemm output out of bounds");
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: all three views were bounds-checked above, and `c` is a unique
    // borrow, so it cannot alias `a` or `b`.
    unsafe {
        T::gemm(
            m,
            k,
            n,
            alpha,
            a.data.as_ptr(),
            a.rs as isize,
            a.cs as isize,
            b.data.as_ptr(),
            b.rs as isize,
            b.cs as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            1,
        )
    }
}

/// `out[m×n] = a[m×k] · b[k×n]`, overwriting `out`.
pub(crate) fn matmul_into<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(out.len(), m * n);
    gemm(T::one(), View::rows(a, m, k), View::rows(b, k, n), T::zero(), out, n);
}

/// `out[k×n] += a[m×k]ᵀ · b[m×n]`. Used for weight gradients.
pub(crate) fn matmul_tn_acc<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(out.len(), k * n);
    gemm(T::one(), View::rows(a, m, k).t(), View::rows(b, m, n), T::one(), out, n);
}

/// `out[m×k] = g[m×n] · b[k×n]ᵀ`, overwriting `out`. Used for input gradients.
pub(crate) fn matmul_nt_into<T: Scalar>(g: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(out.len(), m * k);
    gemm(
        T::one(),
        View::rows(g, m, n),
        View::rows(b, k, n).t(),
        T::zero(),
        out,
        k,
    );
}

#[inline(always)]
pub(crate) fn dot<T: Scalar>(a: &[T], b: &[T]) -> f64 {
    let mut lanes = [0.0f64; 4];
    let (a4, b4) = (a.chunks_exact(4), b.chunks_exact(4));
    let tail: f64 = a4
        .remainder()
        .iter()
        .zip(b4.remainder())
        .map(|(x, y)| x.widen() * y.widen())
        .sum();
    for (x, y) in a4.zip(b4) {
        for l in 0..4 {
            lanes[l] += x[l].widen() * y[l].widen();
        }
    }
    (lanes[0] + lanes[1]) + (lanes[2] + lanes[3]) + tail
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn rejects_length_mismatch() {
        assert!(Tensor::<f32>::new([2, 3], vec![0.0; 5]).is_err());
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let x = Tensor::new([2], vec![0.0f32, 0.0]).unwrap();
        assert_eq!(softmax_last_axis(&x).unwrap().data(), &[0.5, 0.5]);
    }

    #[test]
    fn softmax_hand_value() {
        let x = Tensor::new([2], vec![1.0f64.ln(), 3.0f64.ln()]).unwrap();
        let y = softmax_last_axis(&x).unwrap();
        assert!((y.data()[0] - 0.25).abs() < 1e-12);
        assert!((y.data()[1] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn softmax_large_values_do_not_overflow() {
        let x = Tensor::new([3], vec![1000.0f32; 3]).unwrap();
        let y = softmax_last_axis(&x).unwrap();
        for v in y.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-6);
        }
    }

    #[test]
    fn softmax_reports_non_finite_index() {
        let x = Tensor::new([2, 2], vec![0.0f32, 1.0, f32::NAN, 0.0]).unwrap();
        match softmax_last_axis(&x) {
            Err(Error::NonFinite { index }) => assert_eq!(index, 2),
            other => panic!("unexpected {other:?}"),
        }
        let x = Tensor::new([1], vec![f32::INFINITY]).unwrap();
        assert!(matches!(softmax_last_axis(&x), Err(Error::NonFinite { index: 0 })));
    }

    #[test]
    fn matmul_small() {
        let a = Tensor::new([2, 3], vec![1.0f32, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let b = Tensor::new([3, 2], vec![7.0f32, 8.0, 9.0, 10.0, 11.0, 12.0]).unwrap();
        let c = a.matmul(&b).unwrap();
        assert_eq!(c.data(), &[58.0, 64.0, 139.0, 154.0]);
        assert!(a.matmul(&a).is_err());
    }

    #[test]
    fn transposed_kernels_agree_with_explicit_transpose() {
        let a = Tensor::from_fn([4, 3], |i| (i as f64 * 0.37).sin());
        let b = Tensor::from_fn([4, 5], |i| (i as f64 * 0.11).cos());
        let mut tn = vec![0.0; 15];
        matmul_tn_acc(a.data(), b.data(), &mut tn, 4, 3, 5);
        let expected = a.transpose().unwrap().matmul(&b).unwrap();
        for (x, y) in tn.iter().zip(expected.data()) {
            assert!((x - y).abs() < 1e-12);
        }
        let c = Tensor::from_fn([3, 5], |i| i as f64 - 7.0);
        let mut nt = vec![0.0; 12];
        matmul_nt_into(b.data(), c.data(), &mut nt, 4, 3, 5);
        let expected = b.matmul(&c.transpose().unwrap()).unwrap();
        for (x, y) in nt.iter().zip(expected.data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    proptest! {
        #[test]
        fn strided_gemm_matches_triple_loop(
            (m, k, n) in (1usize..7, 1usize..7, 1usize..7),
            a_t in any::<bool>(),
            b_t in any::<bool>(),
            beta in prop_oneof![Just(0.0f64), Just(1.0), -2.0f64..2.0],
            seed in 0u64..1000,
        ) {
            let val = |i: usize, salt: u64| ((i as u64 * 2654435761 + seed * 97 + salt) % 1000) as f64 / 500.0 - 1.0;
            // Padded strides so views skip entries.
            let (ra, rb) = (k.max(m) + 2, n.max(k) + 3);
            let a_buf: Vec<f64> = (0..ra * (m.max(k) + 1)).map(|i| val(i, 1)).collect();
            let b_buf: Vec<f64> = (0..rb * (k.max(n) + 1)).map(|i| val(i, 2)).collect();
            let a = if a_t { View::new(&a_buf, k, m, ra, 1).t() } else { View::new(&a_buf, m, k, ra, 1) };
            let b = if b_t { View::new(&b_buf, n, k, rb, 1).t() } else { View::new(&b_buf, k, n, rb, 1) };
            let at = |i: usize, j: usize| if a_t { a_buf[j * ra + i] } else { a_buf[i * ra + j] };
            let bt = |i: usize, j: usize| if b_t { b_buf[j * rb + i] } else { b_buf[i * rb + j] };
            let rc = n + 1;
            let c0: Vec<f64> = (0..m * rc).map(|i| val(i, 3)).collect();
            let mut c = c0.clone();
            gemm(0.5, a, b, beta, &mut c, rc);
            for i in 0..m {
                for j in 0..n {
                    let sum: f64 = (0..k).map(|p| at(i, p) * bt(p, j)).sum();
                    let expected = 0.5 * sum + beta * c0[i * rc + j];
                    prop_assert!((c[i * rc + j] - expected).abs() < 1e-12);
                }
                // Padding past each row is untouched.
                prop_assert_eq!(c[i * rc + n], c0[i * rc + n]);
            }
        }

        #[test]
        fn softmax_is_shift_invariant(
            row in proptest::collection::vec(-20.0f64..20.0, 1..12),
            shift in -50.0f64..50.0,
        ) {
            let n = row.len();
            let x = Tensor::new([n], row.clone()).unwrap();
            let shifted = Tensor::new([n], row.iter().map(|v| v + shift).collect()).unwrap();
            let a = softmax_last_axis(&x).unwrap();
            let b = softmax_last_axis(&shifted).unwrap();
            prop_assert!(a.max_abs_diff(&b).unwrap() < 1e-6);
            prop_assert!((a.sum() - 1.0).abs() < 1e-6);
        }
    }
}
