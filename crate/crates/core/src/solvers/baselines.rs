//! First-order and Krylov baselines that share [`SpdProblem`] with the Chebyshev solver.
//!
//! Every method counts iterations as operator applications, so `iters = r`
//! spends the same number of matrix-vector products as a Chebyshev run of
//! length `r`. Gradient descent and AGD start from the free first step
//! `ξ_0 = step·q`; CG starts from zero.

use super::operator::{LinearOperator, SolverTrace, SpdProblem};
use crate::error::Result;


fn start_trace<O: LinearOperator + ?Sized>(p: &SpdProblem<'_, O>, x0: &[f64]) -> SolverTrace {
    SolverTrace {
        iterates: vec![vec![0.0; x0.len()], x0.to_vec()],
        residuals: vec![p.residual_norm(x0)],
        ..SolverTrace::default()
    }
}

fn record<O: LinearOperator + ?Sized>(t: &mut Option<SolverTrace>, p: &SpdProblem<'_, O>, x: &[f64]) {
    if let Some(t) = t.as_mut() {
        t.iterates.push(x.to_vec());
        t.residuals.push(p.residual_norm(x));
    }
}

/// Gradient descent with the fixed optimal step `2/(L + μ)`.
pub fn gd_solve<O: LinearOperator + ?Sized>(
    p: &SpdProblem<'_, O>,
    capture_trace: bool,
) -> Result<(Vec<f64>, Option<SolverTrace>)> {
    p.validate()?;
    let pr = p.precision;
    let n = p.rhs.len();
    let step = pr.round(p.bounds.step());
    let q: Vec<f64> = p.rhs.iter().map(|x| pr.round(*x)).collect();
    let mut x: Vec<f64> = q.iter().map(|v| pr.round(step * v)).collect();
    let mut trace = capture_trace.then(|| start_trace(p, &x));
    let mut hx = vec![0.0; n];
    for _ in 0..p.iters {
        p.op.apply(&x, &mut hx, pr);
        for i in 0..n {
            x[i] = pr.round(x[i] - step * (hx[i] - q[i]));
        }
        record(&mut trace, p, &x);
    }
    Ok((x, trace))
}

/// Nesterov's accelerated gradient with step `1/L` and constant momentum
/// `(√κ − 1)/(√κ + 1)`.
pub fn agd_solve<O: LinearOperator + ?Sized>(
    p: &SpdProblem<'_, O>,
    capture_trace: bool,
) -> Result<(Vec<f64>, Option<SolverTrace>)> {
    p.validate()?;
    let pr = p.precision;
    let n = p.rhs.len();
    let step = pr.round(1.0 / p.bounds.l);
    let sk = p.bounds.kappa().sqrt();
    let beta = pr.round((sk - 1.0) / (sk + 1.0));
    let q: Vec<f64> = p.rhs.iter().map(|x| pr.round(*x)).collect();
    let mut x: Vec<f64> = q.iter().map(|v| pr.round(step * v)).collect();
    let mut prev = x.clone();
    let mut trace = capture_trace.then(|| start_trace(p, &x));
    let mut y = vec![0.0; n];
    let mut hy = vec![0.0; n];
    for _ in 0..p.iters {
        for i in 0..n {
            y[i] = pr.round(x[i] + beta * (x[i] - prev[i]));
        }
        p.op.apply(&y, &mut hy, pr);
        std::mem::swap(&mut prev, &mut x);
        for i in 0..n {
            x[i] = pr.round(y[i] - step * (hy[i] - q[i]));
        }
        record(&mut trace, p, &x);
    }
    Ok((x, trace))
}

/// Conjugate gradient (Hestenes–Stiefel two-term recurrence, no restarts,
/// no re-orthogonalization). A vanishing or non-finite curvature `pᵀHp`
/// freezes the iterate and is counted in the trace.
pub fn cg_solve<O: LinearOperator + ?Sized>(
    p: &SpdProblem<'_, O>,
    capture_trace: bool,
) -> Result<(Vec<f64>, Option<SolverTrace>)> {
    p.validate()?;
    let pr = p.precision;
    let n = p.rhs.len();
    let mut x = vec![0.0; n];
    let mut r: Vec<f64> = p.rhs.iter().map(|v| pr.round(*v)).collect();
    let mut d = r.clone();
    let mut rr = pr.dot(&r, &r);
    let mut trace = capture_trace.then(|| start_trace(p, &x));
    let mut hd = vec![0.0; n];
    let mut stalled = false;
    let tiny = f64::MIN_POSITIVE;
    for _ in 0..p.iters {
        if !stalled {
            p.op.apply(&d, &mut hd, pr);
            let curv = pr.dot(&d, &hd);
            if !(curv.abs() > tiny) || !curv.is_finite() || !rr.is_finite() {
                stalled = true;
                if let Some(t) = trace.as_mut() {
                    t.breakdowns += 1;
                }
            } else if rr == 0.0 {
                stalled = true;
            } else {
                let alpha = pr.round(rr / curv);
                for i in 0..n {
                    x[i] = pr.round(x[i] + alpha * d[i]);
                    r[i] = pr.round(r[i] - alpha * hd[i]);
                }
                let rr_new = pr.dot(&r, &r);
                let beta = pr.round(rr_new / rr);
                for i in 0..n {
                    d[i] = pr.round(r[i] + beta * d[i]);
                }
                rr = rr_new;
            }
        }
        record(&mut trace, p, &x);
    }
    Ok((x, trace))
}

/// Names of the iterative methods that can be selected at run time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum IterativeMethod {
    Chebyshev,
    GradientDescent,
    Accelerated,
    ConjugateGradient,
}

impl IterativeMethod {
    pub const ALL: [IterativeMethod; 4] = [
        IterativeMethod::Chebyshev,
        IterativeMethod::GradientDescent,
        IterativeMethod::Accelerated,
        IterativeMethod::ConjugateGradient,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            IterativeMethod::Chebyshev => "ch",
            IterativeMethod::GradientDescent => "gd",
            IterativeMethod::Accelerated => "agd",
            IterativeMethod::ConjugateGradient => "cg",
        }
    }

    pub fn solve<O: LinearOperator + ?Sized>(
        self,
        p: &SpdProblem<'_, O>,
        capture_trace: bool,
    ) -> Result<(Vec<f64>, Option<SolverTrace>)> {
        match self {
            IterativeMethod::Chebyshev => super::chebyshev_solve(p, capture_trace),
            IterativeMethod::GradientDescent => gd_solve(p, capture_trace),
            IterativeMethod::Accelerated => agd_solve(p, capture_trace),
            IterativeMethod::ConjugateGradient => cg_solve(p, capture_trace),
        }
    }
}

impl std::str::FromStr for IterativeMethod {
    type Err = crate::error::GkaError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ch" | "chebyshev" => Ok(IterativeMethod::Chebyshev),
            "gd" => Ok(IterativeMethod::GradientDescent),
            "agd" => Ok(IterativeMethod::Accelerated),
            "cg" => Ok(IterativeMethod::ConjugateGradient),
            other => Err(crate::error::GkaError::InvalidParameter(format!("unknown solver `{other}`"))),
        }
    }
}


#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{norm2, solve_exact, relative_error, spd_with_spectrum, Matrix, SeededRng};
    use crate::solvers::SpectralBounds;

    #[test]
    fn identity_is_solved_in_one_iteration() {
        let h = Matrix::identity(6);
        let q = [1.0, 2.0, -3.0, 0.5, 0.0, 4.0];
        let b = SpectralBounds::new(1.0, 1.0).unwrap();
        for m in IterativeMethod::ALL {
            let (x, _) = m.solve(&SpdProblem::new(&h, &q, b, 1), false).unwrap();
            assert!(relative_error(&x, &q) < 1e-15, "{m:?}");
        }
    }

    #[test]
    fn cg_reaches_machine_level_on_kappa_51() {
        let mut rng = SeededRng::new(5);
        let n = 128;
        let eigs: Vec<f64> = (0..n).map(|_| rng.uniform_range(0.02, 1.02)).collect();
        let h = spd_with_spectrum(&eigs, &mut rng);
        let q = rng.normal_vec(n);
        let p = SpdProblem::new(&h, &q, SpectralBounds::new(0.02, 1.02).unwrap(), 60);
        let (x, tr) = cg_solve(&p, true).unwrap();
        let tr = tr.unwrap();
        assert_eq!(tr.residuals.len(), 61);
        assert_eq!(tr.breakdowns, 0);
        assert!(relative_error(&x, &solve_exact(&h, &q).unwrap()) < 1e-8);
        assert!(tr.residuals[60] / norm2(&q) < 1e-10);
    }

    #[test]
    fn baselines_decrease_the_residual() {
        let mut rng = SeededRng::new(6);
        let h = spd_with_spectrum(&[0.1, 0.3, 0.5, 0.9, 1.0], &mut rng);
        let q = rng.normal_vec(5);
        let p = SpdProblem::new(&h, &q, SpectralBounds::new(0.1, 1.0).unwrap(), 40);
        for m in IterativeMethod::ALL {
            let (_, tr) = m.solve(&p, true).unwrap();
            let tr = tr.unwrap();
            assert!(tr.residuals[40] < 1e-2 * tr.residuals[0], "{m:?}: {:?}", tr.residuals);
        }
    }

    #[test]
    fn cg_breakdown_is_counted_not_fatal() {
        // Zero operator passes the bounds check but gives pᵀHp = 0.
        let h = Matrix::zeros(3, 3);
        let q = [1.0, 0.0, 0.0];
        let p = SpdProblem::new(&h, &q, SpectralBounds::new(1.0, 1.0).unwrap(), 4);
        let (x, tr) = cg_solve(&p, true).unwrap();
        assert_eq!(x, vec![0.0; 3]);
        assert_eq!(tr.unwrap().breakdowns, 1);
    }

    #[test]
    fn method_names_round_trip() {
        for m in IterativeMethod::ALL {
            assert_eq!(m.as_str().parse::<IterativeMethod>().unwrap(), m);
        }
        assert!("lsqr".parse::<IterativeMethod>().is_err());
    }
}
