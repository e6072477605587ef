//! Dense kernels over row-major slices.

use std::f64::consts::{FRAC_1_SQRT_2, PI};

/// `out += W x` for a `rows x cols` matrix.
pub fn gemv_acc(w: &[f64], rows: usize, cols: usize, x: &[f64], out: &mut [f64]) {
    debug_assert_eq!(w.len(), rows * cols);
    debug_assert_eq!(x.len(), cols);
    for (o, row) in out[..rows].iter_mut().zip(w.chunks_exact(cols)) {
        *o += dot(row, x);
    }
}

/// `out += W^T v`.
pub fn gemv_t_acc(w: &[f64], rows: usize, cols: usize, v: &[f64], out: &mut [f64]) {
    debug_assert_eq!(out.len(), cols);
    for (row, &vi) in w.chunks_exact(cols).zip(&v[..rows]) {
        if vi != 0.0 {
            axpy(vi, row, out);
        }
    }
}

/// `g += a b^T`.
pub fn ger_acc(g: &mut [f64], a: &[f64], b: &[f64]) {
    let cols = b.len();
    for (row, &ai) in g.chunks_exact_mut(cols).zip(a) {
        if ai != 0.0 {
            axpy(ai, b, row);
        }
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    y.iter_mut().zip(x).for_each(|(yi, xi)| *yi += alpha * xi);
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Exact (erf-based) GELU.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x * FRAC_1_SQRT_2))
}

pub fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x * FRAC_1_SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * PI).sqrt();
    cdf + x * pdf
}
