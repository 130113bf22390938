//! Raw numeric kernels shared by the tape ops and the value-only helpers.

use std::sync::Arc;

use super::Tensor;
use crate::error::{shape_err, Error, Result};

/// `c = beta * c + a @ b` with arbitrary strides; `a` is `m x k`, `b` is `k x n`,
/// `c` is a dense row-major `m x n` buffer.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: usize,
    csa: usize,
    b: &[f64],
    rsb: usize,
    csb: usize,
    beta: f64,
    c: &mut [f64],
) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.iter_mut().for_each(|v| *v *= beta);
        return;
    }
    assert!(a.len() > (m - 1) * rsa + (k - 1) * csa);
    assert!(b.len() > (k - 1) * rsb + (n - 1) * csb);
    assert!(c.len() >= m * n);
    // SAFETY: the asserts above bound every index dgemm touches.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// `c (+)= a @ b`, `a: m x k`, `b: k x n`.
pub(crate) fn matmul_nn(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64], acc: bool) {
    gemm(m, k, n, a, k, 1, b, n, 1, if acc { 1.0 } else { 0.0 }, c);
}

/// `c (+)= a @ b^T`, `a: m x k`, `b: n x k`.
pub(crate) fn matmul_nt(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64], acc: bool) {
    gemm(m, k, n, a, k, 1, b, 1, k, if acc { 1.0 } else { 0.0 }, c);
}

/// `c (+)= a^T @ b`, `a: k x m`, `b: k x n`.
pub(crate) fn matmul_tn(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64], acc: bool) {
    gemm(m, k, n, a, 1, m, b, n, 1, if acc { 1.0 } else { 0.0 }, c);
}

/// Boolean query x key permission matrix.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttentionMask {
    queries: usize,
    keys: usize,
    permit: Vec<bool>,
    allowed: Vec<Vec<usize>>,
}

impl AttentionMask {
    pub fn new(queries: usize, keys: usize, permit: Vec<bool>) -> Result<Self> {
        if permit.len() != queries * keys {
            return Err(shape_err(
                "AttentionMask::new",
                format!("{queries}x{keys} mask needs {} entries, got {}", queries * keys, permit.len()),
            ));
        }
        let allowed = (0..queries)
            .map(|i| (0..keys).filter(|&j| permit[i * keys + j]).collect())
            .collect();
        Ok(Self {
            queries,
            keys,
            permit,
            allowed,
        })
    }

    pub fn from_fn(queries: usize, keys: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let permit = (0..queries * keys).map(|idx| f(idx / keys, idx % keys)).collect();
        Self::new(queries, keys, permit).expect("sized by construction")
    }

    pub fn all(queries: usize, keys: usize) -> Self {
        Self::from_fn(queries, keys, |_, _| true)
    }

    pub fn queries(&self) -> usize {
        self.queries
    }

    pub fn keys(&self) -> usize {
        self.keys
    }

    pub fn permits(&self, query: usize, key: usize) -> bool {
        self.permit[query * self.keys + key]
    }

    pub fn row(&self, query: usize) -> &[bool] {
        &self.permit[query * self.keys..(query + 1) * self.keys]
    }

    pub fn allowed(&self, query: usize) -> &[usize] {
        &self.allowed[query]
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.permit
    }

    pub fn check_rows(&self) -> Result<()> {
        match self.allowed.iter().position(|a| a.is_empty()) {
            Some(row) => Err(Error::FullyMaskedRow { row }),
            None => Ok(()),
        }
    }
}

/// Softmax of one score row restricted to `allowed`, written into `out`
/// (masked entries are set to exactly zero).
pub(crate) fn softmax_row(scores: &[f64], allowed: &[usize], out: &mut [f64]) {
    out.fill(0.0);
    let max = allowed
        .iter()
        .map(|&j| scores[j])
        .fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for &j in allowed {
        let e = (scores[j] - max).exp();
        out[j] = e;
        sum += e;
    }
    let inv = 1.0 / sum;
    for &j in allowed {
        out[j] *= inv;
    }
}

/// Masked softmax over a `[groups * queries, keys]` score matrix; the same mask
/// applies to every group.
pub fn masked_softmax(scores: &Tensor, mask: &AttentionMask) -> Result<Tensor> {
    mask.check_rows()?;
    let (rows, keys) = (scores.rows(), scores.cols());
    if scores.shape().len() != 2 || keys != mask.keys() || rows % mask.queries() != 0 {
        return Err(shape_err(
            "masked_softmax",
            format!("scores {:?} vs mask {}x{}", scores.shape(), mask.queries(), mask.keys()),
        ));
    }
    let mut out = vec![0.0; rows * keys];
    for r in 0..rows {
        let q = r % mask.queries();
        softmax_row(scores.row(r), mask.allowed(q), &mut out[r * keys..(r + 1) * keys]);
    }
    Tensor::matrix(rows, keys, out)
}

/// Transformer-style timestep embedding: `dim/2` sine components followed by
/// `dim/2` cosine components, frequency `10000^(-2k/dim)`.
pub fn sinusoidal_embed(tau: f64, dim: usize) -> Result<Tensor> {
    Ok(Tensor::vector(sinusoid_values(tau, dim)?))
}

pub(crate) fn sinusoid_values(tau: f64, dim: usize) -> Result<Vec<f64>> {
    if dim < 2 || !dim.is_multiple_of(2) {
        return Err(Error::OddEmbeddingDim(dim));
    }
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for k in 0..half {
        let freq = 10000f64.powf(-2.0 * k as f64 / dim as f64);
        out[k] = (tau * freq).sin();
        out[half + k] = (tau * freq).cos();
    }
    Ok(out)
}

/// Shared, cheaply clonable mask handle for tape records.
pub type SharedMask = Arc<AttentionMask>;

pub(crate) fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}
