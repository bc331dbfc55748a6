//! Chebyshev iteration for SPD systems with known spectral bounds.
//!
//! With `ρ = (L − μ)/(L + μ)` the iteration is
//!
//! ```text
//! ξ_{-1} = 0,  ξ_0 = 2q/(L + μ),  ω_0 = 2
//! ω_i = 4 / (4 − ρ² ω_{i−1})
//! ξ_i = ξ_{i−1} − (2ω_i/(L + μ)) (H ξ_{i−1} − q) + (ω_i − 1)(ξ_{i−1} − ξ_{i−2})
//! ```
//!
//! The weights decrease monotonically from 2 towards the smaller fixed point
//! `ω₁* = 2(1 − √(1 − ρ²))/ρ²` of the recursion, so every division in the
//! loop stays in `[2, 4]`.

use super::operator::{LinearOperator, SolverTrace, SpdProblem};
use crate::error::{GkaError, Result};

/// `ω_0..ω_r` for contraction ratio `ρ`.
pub fn chebyshev_weight_schedule(rho: f64, iters: usize) -> Result<Vec<f64>> {
    if !(0.0..1.0).contains(&rho) {
        return Err(GkaError::InvalidParameter(format!("rho must lie in [0, 1), got {rho}")));
    }
    let mut w = Vec::with_capacity(iters + 1);
    w.push(2.0);
    for i in 1..=iters {
        let prev = w[i - 1];
        w.push(4.0 / (4.0 - rho * rho * prev));
    }
    Ok(w)
}

/// The two fixed points `(ω₁*, ω₂*)` of `ω ↦ 4/(4 − ρ²ω)`; `(1, ∞)` at `ρ = 0`.
pub fn omega_fixed_points(rho: f64) -> (f64, f64) {
    let r2 = rho * rho;
    if r2 == 0.0 {
        return (1.0, f64::INFINITY);
    }
    let s = (1.0 - r2).sqrt();
    // 1 − √(1 − ρ²) cancels badly for small ρ; use the conjugate form.
    let lower = 2.0 / (1.0 + s);
    let upper = 2.0 * (1.0 + s) / r2;
    (lower, upper)
}

/// Linear rate at which `ω_i → ω₁*`:
/// `R = ((κ − 1)/(κ + 1)) · ((√κ − 1)/(√κ + 1))`.
pub fn weight_contraction_rate(kappa: f64) -> f64 {
    let sk = kappa.sqrt();
    (kappa - 1.0) / (kappa + 1.0) * (sk - 1.0) / (sk + 1.0)
}

/// Worst-case relative error `1 / T_r((κ + 1)/(κ − 1))` of `r` Chebyshev
/// iterations from a zero start, over all spectra inside the bounds.
pub fn chebyshev_error_bound(kappa: f64, iters: usize) -> f64 {
    1.0 / (iters as f64 * ((kappa + 1.0) / (kappa - 1.0)).acosh()).cosh()
}

/// Final two iterates and weight of a Chebyshev run; enough to replay it backwards.
#[derive(Debug, Clone, PartialEq)]
pub struct ChebyshevTail {
    pub xi_r: Vec<f64>,
    pub xi_prev: Vec<f64>,
    pub omega_r: f64,
}

/// Run `r` Chebyshev iterations on `H ξ = q`.
pub fn chebyshev_solve<O: LinearOperator + ?Sized>(
    p: &SpdProblem<'_, O>,
    capture_trace: bool,
) -> Result<(Vec<f64>, Option<SolverTrace>)> {
    let (x, _tail, trace) = run(p, capture_trace)?;
    Ok((x, trace))
}

/// As [`chebyshev_solve`], also returning the tail needed by reverse-mode replay.
pub fn chebyshev_solve_with_tail<O: LinearOperator + ?Sized>(
    p: &SpdProblem<'_, O>,
) -> Result<(Vec<f64>, ChebyshevTail)> {
    let (x, tail, _) = run(p, false)?;
    Ok((x, tail))
}

fn run<O: LinearOperator + ?Sized>(
    p: &SpdProblem<'_, O>,
    capture: bool,
) -> Result<(Vec<f64>, ChebyshevTail, Option<SolverTrace>)> {
    p.validate()?;
    let pr = p.precision;
    let n = p.rhs.len();
    let rho = p.bounds.rho();
    let step = pr.round(p.bounds.step());
    let rho2 = pr.round(rho * rho);
    let q: Vec<f64> = p.rhs.iter().map(|x| pr.round(*x)).collect();

    let mut prev = vec![0.0; n];
    let mut xi: Vec<f64> = q.iter().map(|x| pr.round(step * x)).collect();
    let mut omega = 2.0;

    let mut trace = capture.then(|| SolverTrace {
        iterates: vec![prev.clone(), xi.clone()],
        residuals: vec![p.residual_norm(&xi)],
        weights: vec![omega],
        omega_star: if rho > 0.0 { omega_fixed_points(rho) } else { (0.0, 0.0) },
        breakdowns: 0,
    });

    let mut hx = vec![0.0; n];
    let mut next = vec![0.0; n];
    for _ in 1..=p.iters {
        omega = pr.round(4.0 / pr.round(4.0 - pr.round(rho2 * omega)));
        let gstep = pr.round(step * omega);
        let mom = pr.round(omega - 1.0);
        p.op.apply(&xi, &mut hx, pr);
        // One fused elementwise update per iteration: a single rounding.
        for i in 0..n {
            next[i] = pr.round(xi[i] - gstep * (hx[i] - q[i]) + mom * (xi[i] - prev[i]));
        }
        std::mem::swap(&mut prev, &mut xi);
        std::mem::swap(&mut xi, &mut next);
        if let Some(t) = trace.as_mut() {
            t.iterates.push(xi.clone());
            t.residuals.push(p.residual_norm(&xi));
            t.weights.push(omega);
        }
    }

    let tail = ChebyshevTail {
        xi_r: xi.clone(),
        xi_prev: prev,
        omega_r: omega,
    };
    Ok((xi, tail, trace))
}
