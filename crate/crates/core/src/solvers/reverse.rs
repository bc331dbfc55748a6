//! Gradients of a Chebyshev solve.
//!
//! Two routes are provided. [`implicit_backward`] runs the forward solver on
//! the upstream gradient, which is valid because the Chebyshev output is a
//! symmetric polynomial in `H` applied to `q`. [`reverse_chebyshev`] replays
//! the iteration backwards from its last two iterates, reconstructing earlier
//! iterates on the fly instead of storing them, and accumulates exact
//! reverse-mode gradients for both `q` and `H`.

use super::chebyshev::{chebyshev_solve, chebyshev_weight_schedule, ChebyshevTail};
use super::operator::{LinearOperator, SpdProblem};
use crate::error::{GkaError, Result};
use crate::numerics::{Matrix, Precision};

/// Smallest `|ω_i − 1|` the reversal will divide by.
pub const MIN_REVERSAL_DIVISOR: f64 = 1e-6;

/// `dq = CH(H, dx̂, r)` with the operator and bounds of the forward solve.
pub fn implicit_backward<O: LinearOperator + ?Sized>(p: &SpdProblem<'_, O>, dx: &[f64]) -> Result<Vec<f64>> {
    Ok(chebyshev_solve(&p.with_rhs(dx), false)?.0)
}

/// Weights `ν_{r}, ν_{r−1}, …, ν_1` obtained by inverting the schedule from
/// its last value: `ν_{i−1} = (4/ρ²)(1 − 1/ν_i)`. Returned in forward order
/// `ν_0..ν_r` with `ν_0 = 2` fixed.
///
/// The inverse map is expanding around the attracting fixed point, so
/// rounding errors grow by roughly `1/R` per step. For `κ` near 51 and
/// `r ≤ 30` the drift stays below `1e-8`.
pub fn reverse_weight_schedule(rho: f64, omega_r: f64, iters: usize) -> Vec<f64> {
    let mut w = vec![0.0; iters + 1];
    w[0] = 2.0;
    if iters == 0 {
        return w;
    }
    w[iters] = omega_r;
    for i in (2..=iters).rev() {
        w[i - 1] = if rho == 0.0 { 1.0 } else { 4.0 / (rho * rho) * (1.0 - 1.0 / w[i]) };
    }
    w
}

/// Output of [`reverse_chebyshev`].
#[derive(Debug, Clone)]
pub struct ReverseGradients {
    pub dq: Vec<f64>,
    /// Gradient with respect to every entry of `H` (not symmetrized).
    pub dh: Matrix,
    /// Iterates `ξ_{-1}, ξ_0, …, ξ_r` as reconstructed during the replay.
    pub reconstructed: Vec<Vec<f64>>,
}

/// Reverse-mode gradient of `ξ_r` through `r` Chebyshev steps, given upstream `dξ_r`.
///
/// The step `ξ_i = A_i ξ_{i−1} + b_i ξ_{i−2} + c_i q` with `A_i = ω_i I − c_i H`,
/// `b_i = 1 − ω_i` and `c_i = 2ω_i/(L + μ)` is inverted as
/// `ξ_{i−2} = (ξ_i − A_i ξ_{i−1} − c_i q)/b_i`.
///
/// The weights are regenerated from `ρ` rather than inverted, since they are
/// scalars and the forward recursion is the stable direction.
pub fn reverse_chebyshev<O: LinearOperator + ?Sized>(
    p: &SpdProblem<'_, O>,
    tail: &ChebyshevTail,
    dxi_r: &[f64],
) -> Result<ReverseGradients> {
    p.validate()?;
    let n = p.rhs.len();
    if dxi_r.len() != n {
        return Err(GkaError::shape("reverse_chebyshev", n, dxi_r.len()));
    }
    let r = p.iters;
    let step = p.bounds.step();
    let w = chebyshev_weight_schedule(p.bounds.rho(), r)?;
    let q = p.rhs;

    let mut dq = vec![0.0; n];
    let mut dh = Matrix::zeros(n, n);
    let mut reconstructed = vec![Vec::new(); r + 2];
    reconstructed[r + 1] = tail.xi_r.clone();

    let mut cur = dxi_r.to_vec();
    let mut carry = vec![0.0; n];
    let mut xi_i = tail.xi_r.clone();
    let mut xi_im1 = if r == 0 { vec![0.0; n] } else { tail.xi_prev.clone() };
    let mut hv = vec![0.0; n];

    for i in (1..=r).rev() {
        let omega = w[i];
        let c = step * omega;
        let b = 1.0 - omega;
        reconstructed[i] = xi_im1.clone();

        for k in 0..n {
            dq[k] += c * cur[k];
        }
        dh.add_outer(-c, &cur, &xi_im1);

        // g_{i−1} = A_iᵀ g_i + (b_{i+1} g_{i+1} already in carry); H is symmetric.
        p.op.apply(&cur, &mut hv, Precision::Full);
        let mut next = carry;
        for k in 0..n {
            next[k] += omega * cur[k] - c * hv[k];
        }
        carry = cur.iter().map(|g| b * g).collect();
        cur = next;

        let xi_im2 = if i == 1 {
            vec![0.0; n]
        } else {
            if b.abs() < MIN_REVERSAL_DIVISOR {
                return Err(GkaError::DegenerateReversal { iteration: i, divisor: b });
            }
            p.op.apply(&xi_im1, &mut hv, Precision::Full);
            (0..n)
                .map(|k| (xi_i[k] - (omega * xi_im1[k] - c * hv[k]) - c * q[k]) / b)
                .collect()
        };
        xi_i = std::mem::replace(&mut xi_im1, xi_im2);
    }
    // ξ_0 = c_0 q; the carry into ξ_{-1} is discarded.
    for k in 0..n {
        dq[k] += step * cur[k];
    }
    reconstructed[0] = vec![0.0; n];
    if r == 0 {
        reconstructed[1] = tail.xi_r.clone();
    }
    Ok(ReverseGradients { dq, dh, reconstructed })
}

/// Divisors `−b_i = ω_i − 1` for `i = 1..=r`.
pub fn reversal_divisors(rho: f64, iters: usize) -> Result<Vec<f64>> {
    Ok(chebyshev_weight_schedule(rho, iters)?[1..].iter().map(|w| w - 1.0).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{dot, relative_error, spd_with_spectrum, SeededRng};
    use crate::solvers::{chebyshev_solve_with_tail, SpectralBounds};

    fn problem(n: usize, seed: u64) -> (Matrix, Vec<f64>, SpectralBounds) {
        let mut rng = SeededRng::new(seed);
        let eigs: Vec<f64> = (0..n).map(|_| rng.uniform_range(0.02, 1.02)).collect();
        (spd_with_spectrum(&eigs, &mut rng), rng.normal_vec(n), SpectralBounds::new(0.02, 1.02).unwrap())
    }

    #[test]
    fn zero_iterations_is_a_single_scaled_step() {
        let (h, q, b) = problem(5, 1);
        let p = SpdProblem::new(&h, &q, b, 0);
        let (_, tail) = chebyshev_solve_with_tail(&p).unwrap();
        let g = [1.0, -1.0, 0.5, 2.0, 0.0];
        let out = reverse_chebyshev(&p, &tail, &g).unwrap();
        for k in 0..5 {
            assert_eq!(out.dq[k], b.step() * g[k]);
        }
        assert_eq!(out.dh.frobenius_norm(), 0.0);
    }

    #[test]
    fn reconstruction_matches_stored_iterates() {
        let (h, q, b) = problem(16, 2);
        let p = SpdProblem::new(&h, &q, b, 10);
        let (_, tr) = chebyshev_solve(&p, true).unwrap();
        let tr = tr.unwrap();
        let (_, tail) = chebyshev_solve_with_tail(&p).unwrap();
        let out = reverse_chebyshev(&p, &tail, &q).unwrap();
        for (a, s) in out.reconstructed.iter().zip(&tr.iterates) {
            let scale = s.iter().fold(1.0f64, |m, x| m.max(x.abs()));
            for (x, y) in a.iter().zip(s) {
                assert!((x - y).abs() <= 1e-8 * scale);
            }
        }
    }

    #[test]
    fn implicit_and_reverse_dq_agree() {
        for (seed, r) in [(3, 5), (4, 10), (5, 30)] {
            let (h, q, b) = problem(64, seed);
            let p = SpdProblem::new(&h, &q, b, r);
            let (_, tail) = chebyshev_solve_with_tail(&p).unwrap();
            let g = SeededRng::new(seed + 100).normal_vec(64);
            let rev = reverse_chebyshev(&p, &tail, &g).unwrap();
            let imp = implicit_backward(&p, &g).unwrap();
            assert!(relative_error(&imp, &rev.dq) <= 1e-10);
        }
    }

    #[test]
    fn gradients_match_central_differences() {
        let (h, q, b) = problem(6, 7);
        let r = 12;
        let c = SeededRng::new(8).normal_vec(6);
        let loss = |h: &Matrix, q: &[f64]| dot(&c, &chebyshev_solve(&SpdProblem::new(h, q, b, r), false).unwrap().0);
        let p = SpdProblem::new(&h, &q, b, r);
        let (_, tail) = chebyshev_solve_with_tail(&p).unwrap();
        let rev = reverse_chebyshev(&p, &tail, &c).unwrap();
        let eps = 1e-5;
        let mut fd = vec![0.0; 6];
        for k in 0..6 {
            let mut qp = q.clone();
            let mut qm = q.clone();
            qp[k] += eps;
            qm[k] -= eps;
            fd[k] = (loss(&h, &qp) - loss(&h, &qm)) / (2.0 * eps);
        }
        assert!(relative_error(&rev.dq, &fd) <= 1e-6);
        let mut fd_h = Matrix::zeros(6, 6);
        for i in 0..6 {
            for j in 0..6 {
                let mut hp = h.clone();
                let mut hm = h.clone();
                hp.as_mut_slice()[i * 6 + j] += eps;
                hm.as_mut_slice()[i * 6 + j] -= eps;
                fd_h.as_mut_slice()[i * 6 + j] = (loss(&hp, &q) - loss(&hm, &q)) / (2.0 * eps);
            }
        }
        assert!(relative_error(rev.dh.as_slice(), fd_h.as_slice()) <= 1e-6);
    }

    #[test]
    fn identity_shrinkage() {
        let d = 9usize;
        let a = 0.1;
        let lam = a * (d as f64).sqrt();
        let h = Matrix::scaled_identity(d, 1.0 + lam);
        let dx: Vec<f64> = (0..d).map(|i| i as f64 - 4.0).collect();
        let b = SpectralBounds::new(lam, 1.0 + lam).unwrap();
        let dq = implicit_backward(&SpdProblem::new(&h, &dx, b, 30), &dx).unwrap();
        let expect: Vec<f64> = dx.iter().map(|x| x / (1.0 + lam)).collect();
        assert!(relative_error(&dq, &expect) < 1e-10);
    }

    #[test]
    fn divisors_are_bounded_for_kappa_at_least_ten() {
        for kappa in [10.0, 20.0, 51.0, 101.0, 1e4] {
            let rho = (kappa - 1.0) / (kappa + 1.0);
            for d in reversal_divisors(rho, 200).unwrap() {
                assert!((0.25..=1.0).contains(&d), "kappa {kappa}: {d}");
            }
        }
    }

    #[test]
    fn reverse_weights_retrace_the_forward_schedule() {
        let rho = 1.0 / 1.04;
        let w = chebyshev_weight_schedule(rho, 30).unwrap();
        let v = reverse_weight_schedule(rho, w[30], 30);
        for (a, b) in w.iter().zip(&v) {
            assert!((a - b).abs() < 1e-8);
        }
    }

    #[test]
    fn degenerate_reversal_is_an_error() {
        let h = Matrix::scaled_identity(3, 2.0);
        let q = [1.0, 2.0, 3.0];
        let p = SpdProblem::new(&h, &q, SpectralBounds::new(2.0, 2.0).unwrap(), 3);
        let (_, tail) = chebyshev_solve_with_tail(&p).unwrap();
        assert!(matches!(
            reverse_chebyshev(&p, &tail, &q),
            Err(GkaError::DegenerateReversal { .. })
        ));
    }
}
