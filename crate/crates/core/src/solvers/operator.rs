use crate::error::{GkaError, Result};
use crate::numerics::{Matrix, Precision};

/// A symmetric linear map `x ↦ H x` that never has to be materialized.
pub trait LinearOperator: Sync {
    fn dim(&self) -> usize;

    /// `out = H x`, rounded to `precision`.
    fn apply(&self, x: &[f64], out: &mut [f64], precision: Precision);
}

impl LinearOperator for Matrix {
    fn dim(&self) -> usize {
        self.rows()
    }

    fn apply(&self, x: &[f64], out: &mut [f64], precision: Precision) {
        if precision.is_full() {
            self.matvec_into(x, out);
        } else {
            for (i, o) in out.iter_mut().enumerate() {
                *o = precision.dot(self.row(i), x);
            }
        }
    }
}

/// `H + shift·I` on top of another operator.
#[derive(Debug, Clone, Copy)]
pub struct Shifted<'a, O: ?Sized> {
    pub inner: &'a O,
    pub shift: f64,
}

impl<'a, O: LinearOperator + ?Sized> Shifted<'a, O> {
    pub fn new(inner: &'a O, shift: f64) -> Self {
        Shifted { inner, shift }
    }
}

impl<O: LinearOperator + ?Sized> LinearOperator for Shifted<'_, O> {
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn apply(&self, x: &[f64], out: &mut [f64], precision: Precision) {
        self.inner.apply(x, out, precision);
        let s = precision.round(self.shift);
        for (o, xi) in out.iter_mut().zip(x) {
            *o = precision.round(*o + precision.round(s * xi));
        }
    }
}

/// Eigenvalue enclosure `[mu, l]` of an SPD operator.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpectralBounds {
    pub mu: f64,
    pub l: f64,
}

impl SpectralBounds {
    pub fn new(mu: f64, l: f64) -> Result<Self> {
        let b = SpectralBounds { mu, l };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.mu > 0.0) || !self.mu.is_finite() {
            return Err(GkaError::InvalidParameter(format!("mu must be positive and finite, got {}", self.mu)));
        }
        if !(self.l >= self.mu) || !self.l.is_finite() {
            return Err(GkaError::InvalidParameter(format!("L must satisfy L >= mu, got L={} mu={}", self.l, self.mu)));
        }
        Ok(())
    }

    /// `(L − μ)/(L + μ)`
    pub fn rho(&self) -> f64 {
        (self.l - self.mu) / (self.l + self.mu)
    }

    pub fn kappa(&self) -> f64 {
        self.l / self.mu
    }

    /// Optimal gradient step `2/(L + μ)`.
    pub fn step(&self) -> f64 {
        2.0 / (self.l + self.mu)
    }
}

/// A linear system `H ξ = q` together with what an iterative method needs to run.
#[derive(Clone, Copy)]
pub struct SpdProblem<'a, O: ?Sized> {
    pub op: &'a O,
    pub rhs: &'a [f64],
    pub bounds: SpectralBounds,
    pub iters: usize,
    pub precision: Precision,
}

impl<'a, O: LinearOperator + ?Sized> SpdProblem<'a, O> {
    pub fn new(op: &'a O, rhs: &'a [f64], bounds: SpectralBounds, iters: usize) -> Self {
        SpdProblem {
            op,
            rhs,
            bounds,
            iters,
            precision: Precision::Full,
        }
    }

    pub fn with_precision(mut self, precision: Precision) -> Self {
        self.precision = precision;
        self
    }

    /// Same operator and bounds, different right-hand side.
    pub fn with_rhs<'b>(&self, rhs: &'b [f64]) -> SpdProblem<'b, O>
    where
        'a: 'b,
    {
        SpdProblem {
            op: self.op,
            rhs,
            bounds: self.bounds,
            iters: self.iters,
            precision: self.precision,
        }
    }

    pub(crate) fn validate(&self) -> Result<()> {
        self.bounds.validate()?;
        if self.rhs.len() != self.op.dim() {
            return Err(GkaError::shape("SpdProblem", self.op.dim(), self.rhs.len()));
        }
        Ok(())
    }

    /// `‖H ξ − q‖₂` evaluated at full precision.
    pub fn residual_norm(&self, xi: &[f64]) -> f64 {
        let mut hx = vec![0.0; xi.len()];
        self.op.apply(xi, &mut hx, Precision::Full);
        hx.iter()
            .zip(self.rhs)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }
}

/// Per-iteration record of an iterative solve.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SolverTrace {
    /// `ξ_{-1}, ξ_0, …, ξ_r` (the leading zero vector is the implicit start).
    pub iterates: Vec<Vec<f64>>,
    /// `‖H ξ_i − q‖` for `i = 0..=r` at full precision.
    pub residuals: Vec<f64>,
    /// Chebyshev weights `ω_0..ω_r`; empty for other methods.
    pub weights: Vec<f64>,
    /// Fixed points `(ω₁*, ω₂*)` of the weight recursion; zero when `L = μ`.
    pub omega_star: (f64, f64),
    /// Conjugate-gradient breakdowns (vanishing or non-finite `pᵀHp`).
    pub breakdowns: usize,
}
