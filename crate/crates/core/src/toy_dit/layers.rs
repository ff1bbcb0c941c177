//! Forward and backward kernels for the transformer pieces, on flat row-major
//! slices. Every backward kernel accumulates into the gradient buffers it is
//! given.

use crate::scalar::Scalar;
use crate::tensor::{gemm, matmul_into, matmul_nt_into, matmul_tn_acc, softmax_in_place, Tensor, View};

pub(crate) const NORM_EPS: f64 = 1e-5;

/// `x·W + b` for `x` of shape `(rows, in)`.
pub(crate) fn linear<T: Scalar>(x: &[T], weight: &Tensor<T>, bias: &Tensor<T>, rows: usize) -> Vec<T> {
    let (din, dout) = (weight.shape()[0], weight.shape()[1]);
    let mut out = vec![T::zero(); rows * dout];
    matmul_into(x, weight.data(), &mut out, rows, din, dout);
    for row in out.chunks_mut(dout) {
        for (o, &b) in row.iter_mut().zip(bias.data()) {
            *o += b;
        }
    }
    out
}

/// Accumulates weight and bias gradients and returns the input gradient.
pub(crate) fn linear_backward<T: Scalar>(
    x: &[T],
    weight: &Tensor<T>,
    grad_out: &[T],
    rows: usize,
    grad_weight: &mut Tensor<T>,
    grad_bias: &mut Tensor<T>,
) -> Vec<T> {
    let (din, dout) = (weight.shape()[0], weight.shape()[1]);
    matmul_tn_acc(x, grad_out, grad_weight.data_mut(), rows, din, dout);
    let mut col = vec![0.0f64; dout];
    for row in grad_out.chunks(dout) {
        for (c, &g) in col.iter_mut().zip(row) {
            *c += g.widen();
        }
    }
    for (b, c) in grad_bias.data_mut().iter_mut().zip(col) {
        *b = T::narrow(b.widen() + c);
    }
    let mut grad_in = vec![T::zero(); rows * din];
    matmul_nt_into(grad_out, weight.data(), &mut grad_in, rows, din, dout);
    grad_in
}

pub(crate) struct NormCache<T> {
    pub normalized: Vec<T>,
    pub inv_std: Vec<f64>,
}

pub(crate) fn layer_norm<T: Scalar>(
    x: &[T],
    gain: &Tensor<T>,
    bias: &Tensor<T>,
    width: usize,
) -> (Vec<T>, NormCache<T>) {
    let rows = x.len() / width;
    let mut out = vec![T::zero(); x.len()];
    let mut normalized = vec![T::zero(); x.len()];
    let mut inv_std = Vec::with_capacity(rows);
    for r in 0..rows {
        let row = &x[r * width..(r + 1) * width];
        let mean = row.iter().map(|v| v.widen()).sum::<f64>() / width as f64;
        let var = row.iter().map(|v| (v.widen() - mean).powi(2)).sum::<f64>() / width as f64;
        let is = 1.0 / (var + NORM_EPS).sqrt();
        inv_std.push(is);
        for j in 0..width {
            let xh = (row[j].widen() - mean) * is;
            normalized[r * width + j] = T::narrow(xh);
            out[r * width + j] = T::narrow(xh * gain.data()[j].widen() + bias.data()[j].widen());
        }
    }
    (out, NormCache { normalized, inv_std })
}

pub(crate) fn layer_norm_backward<T: Scalar>(
    cache: &NormCache<T>,
    gain: &Tensor<T>,
    grad_out: &[T],
    width: usize,
    grad_gain: &mut Tensor<T>,
    grad_bias: &mut Tensor<T>,
) -> Vec<T> {
    let rows = grad_out.len() / width;
    let mut grad_in = vec![T::zero(); grad_out.len()];
    let mut dg = vec![0.0f64; width];
    let mut db = vec![0.0f64; width];
    let mut dxhat = vec![0.0f64; width];
    for r in 0..rows {
        let go = &grad_out[r * width..(r + 1) * width];
        let xh = &cache.normalized[r * width..(r + 1) * width];
        let mut mean_d = 0.0;
        let mut mean_dx = 0.0;
        for j in 0..width {
            let g = go[j].widen();
            dg[j] += g * xh[j].widen();
            db[j] += g;
            dxhat[j] = g * gain.data()[j].widen();
            mean_d += dxhat[j];
            mean_dx += dxhat[j] * xh[j].widen();
        }
        mean_d /= width as f64;
        mean_dx /= width as f64;
        let is = cache.inv_std[r];
        for j in 0..width {
            grad_in[r * width + j] = T::narrow(is * (dxhat[j] - mean_d - xh[j].widen() * mean_dx));
        }
    }
    for (g, d) in grad_gain.data_mut().iter_mut().zip(dg) {
        *g = T::narrow(g.widen() + d);
    }
    for (b, d) in grad_bias.data_mut().iter_mut().zip(db) {
        *b = T::narrow(b.widen() + d);
    }
    grad_in
}

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C: f64 = 0.044_715;

pub(crate) fn gelu<T: Scalar>(u: &[T]) -> Vec<T> {
    u.iter()
        .map(|&v| {
            let x = v.widen();
            T::narrow(0.5 * x * (1.0 + (GELU_K * (x + GELU_C * x * x * x)).tanh()))
        })
        .collect()
}

pub(crate) fn gelu_backward<T: Scalar>(u: &[T], grad_out: &[T]) -> Vec<T> {
    u.iter()
        .zip(grad_out)
        .map(|(&v, &g)| {
            let x = v.widen();
            let inner = GELU_K * (x + GELU_C * x * x * x);
            let th = inner.tanh();
            let d = 0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * GELU_K * (1.0 + 3.0 * GELU_C * x * x);
            T::narrow(g.widen() * d)
        })
        .collect()
}

/// Per-head attention probabilities, laid out `[head][query][key]`.
///
/// `q` is `(n, d)` and `k` is `(m, d)`; head `h` reads columns
/// `h·dh..(h+1)·dh`.
pub(crate) fn attention_probs<T: Scalar>(q: &[T], k: &[T], n: usize, m: usize, d: usize, heads: usize) -> Vec<T> {
    let dh = d / heads;
    let scale = T::narrow(1.0 / (dh as f64).sqrt());
    let mut probs = vec![T::zero(); heads * n * m];
    for (h, slab) in probs.chunks_mut(n * m).enumerate() {
        let off = h * dh;
        let qh = View::new(&q[off..], n, dh, d, 1);
        let kh = View::new(&k[off..], m, dh, d, 1);
        gemm(scale, qh, kh.t(), T::zero(), slab, m);
        for row in slab.chunks_mut(m) {
            softmax_in_place(row);
        }
    }
    probs
}

/// Weights the values by the per-head probabilities; output is `(n, d)`.
pub(crate) fn attention_apply<T: Scalar>(probs: &[T], v: &[T], n: usize, m: usize, d: usize, heads: usize) -> Vec<T> {
    let dh = d / heads;
    let mut out = vec![T::zero(); n * d];
    for (h, slab) in probs.chunks(n * m).enumerate() {
        let off = h * dh;
        let vh = View::new(&v[off..], m, dh, d, 1);
        gemm(T::one(), View::rows(slab, n, m), vh, T::zero(), &mut out[off..], d);
    }
    out
}

/// Gradients of `attention_apply(attention_probs(q, k), v)` with respect to
/// `q`, `k` and `v`. `pooled_grad`, shaped `(n, m)`, is an extra gradient on
/// the head mean of the probabilities.
#[allow(clippy::too_many_arguments)]
pub(crate) fn attention_backward<T: Scalar>(
    q: &[T],
    k: &[T],
    v: &[T],
    probs: &[T],
    grad_out: &[T],
    pooled_grad: Option<&[f64]>,
    n: usize,
    m: usize,
    d: usize,
    heads: usize,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut dq = vec![T::zero(); n * d];
    let mut dk = vec![T::zero(); m * d];
    let mut dv = vec![T::zero(); m * d];
    let mut ds = vec![T::zero(); n * m];
    for (h, slab) in probs.chunks(n * m).enumerate() {
        let off = h * dh;
        let go = View::new(&grad_out[off..], n, dh, d, 1);
        let (qh, kh, vh) = (
            View::new(&q[off..], n, dh, d, 1),
            View::new(&k[off..], m, dh, d, 1),
            View::new(&v[off..], m, dh, d, 1),
        );
        let p = View::rows(slab, n, m);
        gemm(T::one(), p.t(), go, T::zero(), &mut dv[off..], d);
        // d loss / d probs, then through the softmax.
        gemm(T::one(), go, vh.t(), T::zero(), &mut ds, m);
        for (i, (row, prow)) in ds.chunks_mut(m).zip(slab.chunks(m)).enumerate() {
            if let Some(pg) = pooled_grad {
                for (g, &extra) in row.iter_mut().zip(&pg[i * m..(i + 1) * m]) {
                    *g = T::narrow(g.widen() + extra / heads as f64);
                }
            }
            let weighted: f64 = row.iter().zip(prow).map(|(g, p)| g.widen() * p.widen()).sum();
            for (g, &p) in row.iter_mut().zip(prow) {
                *g = T::narrow(p.widen() * (g.widen() - weighted) * scale);
            }
        }
        let ds_view = View::rows(&ds, n, m);
        gemm(T::one(), ds_view, kh, T::zero(), &mut dq[off..], d);
        gemm(T::one(), ds_view.t(), qh, T::zero(), &mut dk[off..], d);
    }
    (dq, dk, dv)
}

pub(crate) fn add_in_place<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}
