use crate::error::{shape_mismatch, Error, Result};

use super::tensor::Tensor;

/// Variance floor used by every LayerNorm in the crate.
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// `C (+)= op(A) · op(B)` on row-major slices.
///
/// `A` is `m×k` (stored `k×m` when `a_t`), `B` is `k×n` (stored `n×k` when
/// `b_t`), `C` is `m×n`. Each output entry accumulates over `k` in an order
/// that depends only on `k`, so a row computed alone matches the same row
/// computed inside a larger product bit for bit.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c.fill(0.0);
        }
        return;
    }
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the slices have exactly the extents implied by (m, k, n) and
    // the strides above, which the debug assertions check.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// A strided matrix view into a flat buffer: element `(i, j)` lives at
/// `offset + i·rs + j·cs`.
#[derive(Clone, Copy)]
pub(crate) struct View {
    pub offset: usize,
    pub rs: usize,
    pub cs: usize,
}

impl View {
    pub(crate) fn rows(offset: usize, stride: usize) -> Self {
        View { offset, rs: stride, cs: 1 }
    }

    pub(crate) fn t(self) -> Self {
        View { offset: self.offset, rs: self.cs, cs: self.rs }
    }

    fn last(self, r: usize, c: usize) -> usize {
        self.offset + (r - 1) * self.rs + (c - 1) * self.cs
    }
}

/// `c = a·b + beta·c` over strided views, `a` m×k, `b` k×n, `c` m×n.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm_view(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    av: View,
    b: &[f64],
    bv: View,
    c: &mut [f64],
    cv: View,
    accumulate: bool,
) {
    if m == 0 || n == 0 || k == 0 {
        assert!(k != 0 || accumulate, "gemm_view with k = 0 must accumulate");
        return;
    }
    assert!(av.last(m, k) < a.len() && bv.last(k, n) < b.len() && cv.last(m, n) < c.len());
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the asserts above bound the largest index each view touches;
    // strides are non-negative so every other index is smaller.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr().add(av.offset),
            av.rs as isize,
            av.cs as isize,
            b.as_ptr().add(bv.offset),
            bv.rs as isize,
            bv.cs as isize,
            beta,
            c.as_mut_ptr().add(cv.offset),
            cv.rs as isize,
            cv.cs as isize,
        );
    }
}

fn require_matrix(op: &str, t: &Tensor) -> Result<(usize, usize)> {
    if t.shape().len() != 2 {
        return Err(Error::Dimension(format!(
            "{op}: expected a matrix, got shape {:?}",
            t.shape()
        )));
    }
    Ok((t.shape()[0], t.shape()[1]))
}

/// Standard matrix product `a · b`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = require_matrix("matmul", a)?;
    let (k2, n) = require_matrix("matmul", b)?;
    if k != k2 {
        return Err(shape_mismatch("matmul", a.shape(), b.shape()));
    }
    let mut out = vec![0.0; m * n];
    gemm(m, k, n, a.data(), false, b.data(), false, &mut out, false);
    Ok(Tensor::from_parts(vec![m, n], out))
}

/// `a · bᵀ` without materializing the transpose.
pub fn matmul_nt(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = require_matrix("matmul_nt", a)?;
    let (n, k2) = require_matrix("matmul_nt", b)?;
    if k != k2 {
        return Err(shape_mismatch("matmul_nt", a.shape(), b.shape()));
    }
    let mut out = vec![0.0; m * n];
    gemm(m, k, n, a.data(), false, b.data(), true, &mut out, false);
    Ok(Tensor::from_parts(vec![m, n], out))
}

/// `log Σ exp(z_i)` with the max shifted out.
pub fn log_sum_exp(z: &[f64]) -> f64 {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    let s: f64 = z.iter().map(|x| (x - max).exp()).sum();
    max + s.ln()
}

/// Softmax with max-shift. Writes into `out`, which must match `z` in
/// length, and returns `log Σ exp z`.
pub(crate) fn softmax_into(z: &[f64], out: &mut [f64]) -> f64 {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for (o, x) in out.iter_mut().zip(z) {
        *o = (x - max).exp();
        s += *o;
    }
    let inv = 1.0 / s;
    for o in out.iter_mut() {
        *o *= inv;
    }
    max + s.ln()
}

pub fn stable_softmax(z: &[f64]) -> Result<Vec<f64>> {
    if z.is_empty() {
        return Err(Error::Dimension("softmax of an empty vector".into()));
    }
    if z.iter().any(|x| !x.is_finite()) {
        return Err(Error::Numeric("softmax input has non-finite entries".into()));
    }
    let mut out = vec![0.0; z.len()];
    softmax_into(z, &mut out);
    Ok(out)
}

/// Normalizes one row in place into `out`, returning `(mean, 1/σ)`.
pub(crate) fn layer_norm_row(x: &[f64], gain: &[f64], bias: &[f64], out: &mut [f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let rstd = 1.0 / (var + LAYER_NORM_EPS).sqrt();
    for i in 0..x.len() {
        out[i] = (x[i] - mean) * rstd * gain[i] + bias[i];
    }
    (mean, rstd)
}

/// LayerNorm of a single vector: zero mean, unit (population) variance, then
/// `gain ⊙ x̂ + bias`.
pub fn layer_norm(x: &[f64], gain: &[f64], bias: &[f64]) -> Result<Vec<f64>> {
    let d = x.len();
    if d < 2 {
        return Err(Error::Dimension(format!("layer_norm needs d >= 2, got {d}")));
    }
    if gain.len() != d || bias.len() != d {
        return Err(shape_mismatch("layer_norm", &[d], &[gain.len(), bias.len()]));
    }
    let mut out = vec![0.0; d];
    layer_norm_row(x, gain, bias, &mut out);
    Ok(out)
}

/// Row-wise LayerNorm of a matrix.
pub fn layer_norm_rows(x: &Tensor, gain: &[f64], bias: &[f64]) -> Result<Tensor> {
    let (r, d) = require_matrix("layer_norm_rows", x)?;
    if d < 2 {
        return Err(Error::Dimension(format!("layer_norm needs d >= 2, got {d}")));
    }
    if gain.len() != d || bias.len() != d {
        return Err(shape_mismatch("layer_norm_rows", x.shape(), &[gain.len()]));
    }
    let mut out = vec![0.0; r * d];
    for i in 0..r {
        layer_norm_row(x.row(i), gain, bias, &mut out[i * d..(i + 1) * d]);
    }
    Ok(Tensor::from_parts(vec![r, d], out))
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// Tanh-approximated GELU.
/// `tanh` through one `exp`; several times cheaper than the libm call and
/// accurate to a few ulps in absolute terms, which is all GELU needs.
fn fast_tanh(u: f64) -> f64 {
    1.0 - 2.0 / (1.0 + (2.0 * u).exp())
}

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + fast_tanh(GELU_C * (x + 0.044715 * x * x * x)))
}

pub(crate) fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = fast_tanh(u);
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Pairwise (cascade) summation; the result depends only on the order of
/// `xs`, not on how callers chunk work.
pub(crate) fn pairwise_sum(xs: &[f64]) -> f64 {
    if xs.len() <= 8 {
        return xs.iter().sum();
    }
    let mid = xs.len() / 2;
    pairwise_sum(&xs[..mid]) + pairwise_sum(&xs[mid..])
}
