//! Synthetic regression systems for solver benchmarks.

use crate::numerics::{Matrix, Precision, SeededRng};

/// `H = (Σ_{i≤t} k_i k_iᵀ)/‖Σ_{i≤t} k_i k_iᵀ‖_F + ridge·I` for `t` random unit keys,
/// plus a random unit right-hand side. Every entry is rounded to `precision`.
///
/// The spectrum lies in `[ridge, 1 + ridge]`.
pub fn normalized_covariance_problem(
    dim: usize,
    prefix: usize,
    ridge: f64,
    precision: Precision,
    rng: &mut SeededRng,
) -> (Matrix, Vec<f64>) {
    let mut h = Matrix::zeros(dim, dim);
    for _ in 0..prefix.max(1) {
        let mut k = rng.unit_vector(dim);
        precision.round_slice(&mut k);
        h.add_outer(1.0, &k, &k);
    }
    let norm = h.frobenius_norm();
    h.scale(1.0 / norm);
    h.add_diagonal(ridge);
    h.round(precision);
    let mut q = rng.unit_vector(dim);
    precision.round_slice(&mut q);
    (h, q)
}
