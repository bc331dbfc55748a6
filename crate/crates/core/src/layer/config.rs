use serde::{Deserialize, Serialize};

use crate::error::{GkaError, Result};
use crate::numerics::Precision;

/// How `λ_t` is chosen at every position.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", deny_unknown_fields)]
pub enum Regularization {
    /// `λ_t = a·max(‖H_t‖_F, floor)`, which caps the condition number at `(a + 1)/a`.
    Adaptive { a: f64 },
    /// A fixed `λ` at every position.
    Constant { lambda: f64 },
}

/// Which solver produces `x̂_t` (and, through the same solver, `dq_t`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InnerSolver {
    Chebyshev,
    ConjugateGradient,
    /// Dense Cholesky on the materialized system.
    Exact,
}

/// Where the convex combination of `x̂_t` and `q_t` is taken.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlphaPlacement {
    /// `y_t = U_t(α x̂_t + (1 − α) q_t)`.
    #[default]
    BeforeProjection,
    /// `y_t = α U_t x̂_t + (1 − α) U_t q_t`.
    AfterProjection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerConfig {
    pub head_dim: usize,
    pub chunk_size: usize,
    pub regularization: Regularization,
    pub iters: usize,
    pub normalize_qk: bool,
    #[serde(default)]
    pub precision: Precision,
    #[serde(default = "default_solver")]
    pub solver: InnerSolver,
    #[serde(default)]
    pub alpha_placement: AlphaPlacement,
    #[serde(default = "default_floor")]
    pub norm_floor: f64,
}

fn default_solver() -> InnerSolver {
    InnerSolver::Chebyshev
}

fn default_floor() -> f64 {
    1e-6
}

impl LayerConfig {
    /// `a = 0.02`, `r = 30`, `C = 16`, normalized queries and keys.
    pub fn new(head_dim: usize) -> Self {
        LayerConfig {
            head_dim,
            chunk_size: 16,
            regularization: Regularization::Adaptive { a: 0.02 },
            iters: 30,
            normalize_qk: true,
            precision: Precision::Full,
            solver: InnerSolver::Chebyshev,
            alpha_placement: AlphaPlacement::BeforeProjection,
            norm_floor: default_floor(),
        }
    }

    pub fn with_chunk_size(mut self, c: usize) -> Self {
        self.chunk_size = c;
        self
    }

    pub fn with_regularization(mut self, r: Regularization) -> Self {
        self.regularization = r;
        self
    }

    pub fn with_iters(mut self, r: usize) -> Self {
        self.iters = r;
        self
    }

    pub fn with_normalize_qk(mut self, on: bool) -> Self {
        self.normalize_qk = on;
        self
    }

    pub fn with_precision(mut self, p: Precision) -> Self {
        self.precision = p;
        self
    }

    pub fn with_solver(mut self, s: InnerSolver) -> Self {
        self.solver = s;
        self
    }

    pub fn with_alpha_placement(mut self, p: AlphaPlacement) -> Self {
        self.alpha_placement = p;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(GkaError::InvalidParameter(m));
        if self.head_dim == 0 {
            return bad("head_dim must be positive".into());
        }
        if self.chunk_size == 0 {
            return bad("chunk_size must be positive".into());
        }
        if self.iters == 0 && self.solver != InnerSolver::Exact {
            return bad("iters must be at least 1".into());
        }
        match self.regularization {
            Regularization::Adaptive { a } if !(a > 0.0 && a.is_finite()) => {
                return bad(format!("regularization coefficient must be positive, got {a}"))
            }
            Regularization::Constant { lambda } if !(lambda > 0.0 && lambda.is_finite()) => {
                return bad(format!("constant lambda must be positive, got {lambda}"))
            }
            _ => {}
        }
        if !(self.norm_floor > 0.0) {
            return bad(format!("norm_floor must be positive, got {}", self.norm_floor));
        }
        Ok(())
    }

    /// `T` rounded up to a multiple of the chunk size.
    pub fn padded_len(&self, t: usize) -> usize {
        t.div_ceil(self.chunk_size) * self.chunk_size
    }
}
