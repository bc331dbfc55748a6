use rayon::prelude::*;

use super::batch::SequenceBatch;
use super::config::{AlphaPlacement, InnerSolver, LayerConfig};
use super::plan::{apply_value_state, lambda_for, plan_head, prepare_head, ChunkOperator, ChunkPlan, LambdaBounds, PreparedHead};
use crate::error::Result;
use crate::numerics::{Cholesky, Matrix, Precision};
use crate::solvers::{cg_solve, chebyshev_solve, chebyshev_solve_with_tail, ChebyshevTail, LinearOperator, SpdProblem};

/// Everything one head's backward pass needs, kept from the forward pass.
#[derive(Debug, Clone)]
pub struct HeadForward {
    pub prep: PreparedHead,
    pub plan: ChunkPlan,
    pub lambdas: Vec<LambdaBounds>,
    /// Solver output `x̂_t` at every padded position.
    pub x_hat: Vec<f64>,
    /// `α_t x̂_t + (1 − α_t) q_t`.
    pub combined: Vec<f64>,
    pub y: Vec<f64>,
    /// `(ξ_r, ξ_{r−1}, ω_r)` per position, when requested and the solver is Chebyshev.
    pub tails: Option<Vec<ChebyshevTail>>,
}

/// Forward-pass cache for a whole batch, one entry per `(batch, head)` pair.
#[derive(Debug, Clone)]
pub struct ForwardState {
    pub cfg: LayerConfig,
    pub batch: usize,
    pub heads: usize,
    pub time: usize,
    pub dim: usize,
    pub per_head: Vec<HeadForward>,
}

impl ForwardState {
    /// `λ_t` in `(b, h, t)` order (padding excluded).
    pub fn lambdas(&self) -> Vec<f64> {
        self.per_head
            .iter()
            .flat_map(|h| h.lambdas[..self.time].iter().map(|l| l.lambda))
            .collect()
    }

    /// `α_t` in `(b, h, t)` order.
    pub fn alphas(&self) -> Vec<f64> {
        self.per_head.iter().flat_map(|h| h.prep.alpha[..self.time].to_vec()).collect()
    }

    /// `x̂_t` in `(b, h, t, d)` order.
    pub fn solutions(&self) -> Vec<f64> {
        let n = self.time * self.dim;
        self.per_head.iter().flat_map(|h| h.x_hat[..n].to_vec()).collect()
    }

    /// Negative squared norms clamped to zero across all heads.
    pub fn clamped_norms(&self) -> usize {
        self.per_head.iter().map(|h| h.plan.clamped).sum()
    }
}

/// `(H + λI)^{-1} rhs` with the configured solver.
pub(crate) fn solve_system<O: LinearOperator + ?Sized>(
    op: &O,
    rhs: &[f64],
    lb: &LambdaBounds,
    cfg: &LayerConfig,
    precision: Precision,
) -> Result<Vec<f64>> {
    let p = SpdProblem::new(op, rhs, lb.bounds(), cfg.iters).with_precision(precision);
    match cfg.solver {
        InnerSolver::Chebyshev => Ok(chebyshev_solve(&p, false)?.0),
        InnerSolver::ConjugateGradient => Ok(cg_solve(&p, false)?.0),
        InnerSolver::Exact => {
            let d = op.dim();
            let mut dense = Matrix::zeros(d, d);
            let mut e = vec![0.0; d];
            let mut col = vec![0.0; d];
            for j in 0..d {
                e[j] = 1.0;
                op.apply(&e, &mut col, precision);
                e[j] = 0.0;
                for i in 0..d {
                    dense.as_mut_slice()[i * d + j] = col[i];
                }
            }
            let mut x = Cholesky::factor(&dense)?.solve(rhs)?;
            precision.round_slice(&mut x);
            Ok(x)
        }
    }
}

pub(crate) fn forward_head(prep: PreparedHead, cfg: &LayerConfig, keep_tails: bool) -> std::result::Result<HeadForward, (usize, crate::GkaError)> {
    let plan = plan_head(&prep, cfg);
    let (c, d, p) = (cfg.chunk_size, prep.dim, cfg.precision);
    let n = prep.padded;
    let mut x_hat = vec![0.0; n * d];
    let mut combined = vec![0.0; n * d];
    let mut y = vec![0.0; n * d];
    let mut lambdas = Vec::with_capacity(n);
    let mut tails = (keep_tails && cfg.solver == InnerSolver::Chebyshev).then(Vec::new);

    for ch in &plan.chunks {
        let keys = &prep.k[ch.start * d..(ch.start + c) * d];
        let vals = &prep.v[ch.start * d..(ch.start + c) * d];
        for pos in 0..c {
            let t = ch.start + pos;
            let lb = lambda_for(plan.norms[t], cfg);
            let weights = ch.column(pos);
            let op = ChunkOperator {
                h0: &ch.h0,
                zeta: ch.zeta[pos],
                keys: &keys[..(pos + 1) * d],
                weights: &weights,
                shift: lb.lambda,
            };
            let q = &prep.q[t * d..(t + 1) * d];
            let x = match tails.as_mut() {
                Some(store) => {
                    let prob = SpdProblem::new(&op, q, lb.bounds(), cfg.iters).with_precision(p);
                    let (x, tail) = chebyshev_solve_with_tail(&prob).map_err(|e| (t, e))?;
                    store.push(tail);
                    x
                }
                None => solve_system(&op, q, &lb, cfg, p).map_err(|e| (t, e))?,
            };
            let a = prep.alpha[t];
            let comb: Vec<f64> = x.iter().zip(q).map(|(xv, qv)| p.round(a * xv + (1.0 - a) * qv)).collect();
            let u = |v: &[f64]| apply_value_state(&ch.u0, ch.zeta[pos], &keys[..(pos + 1) * d], &vals[..(pos + 1) * d], &weights, v, p);
            let out = match cfg.alpha_placement {
                AlphaPlacement::BeforeProjection => u(&comb),
                AlphaPlacement::AfterProjection => {
                    let ux = u(&x);
                    let uq = u(q);
                    ux.iter().zip(&uq).map(|(a1, b1)| p.round(a * a1 + (1.0 - a) * b1)).collect()
                }
            };
            x_hat[t * d..(t + 1) * d].copy_from_slice(&x);
            combined[t * d..(t + 1) * d].copy_from_slice(&comb);
            y[t * d..(t + 1) * d].copy_from_slice(&out);
            lambdas.push(lb);
        }
    }
    Ok(HeadForward {
        prep,
        plan,
        lambdas,
        x_hat,
        combined,
        y,
        tails,
    })
}

fn run(batch: &SequenceBatch, cfg: &LayerConfig, keep_tails: bool) -> Result<(Vec<f64>, ForwardState)> {
    cfg.validate()?;
    batch.validate()?;
    if batch.dim != cfg.head_dim {
        return Err(crate::GkaError::shape("forward_chunkwise head_dim", cfg.head_dim, batch.dim));
    }
    let per_head = (0..batch.heads_total())
        .into_par_iter()
        .map(|bh| {
            forward_head(prepare_head(&batch.head(bh), cfg), cfg, keep_tails)
                .map_err(|(t, e)| e.at(bh / batch.heads, bh % batch.heads, t))
        })
        .collect::<Result<Vec<_>>>()?;
    let n = batch.time * batch.dim;
    let y = per_head.iter().flat_map(|h| h.y[..n].iter().copied()).collect();
    Ok((
        y,
        ForwardState {
            cfg: cfg.clone(),
            batch: batch.batch,
            heads: batch.heads,
            time: batch.time,
            dim: batch.dim,
            per_head,
        },
    ))
}

/// Chunk-wise forward pass. Returns `y` in `(b, h, t, d)` order and the cache
/// for [`backward_chunkwise`](super::backward_chunkwise).
///
/// Within a chunk the system at position `c` is applied as
/// `ζ_c H_0 ξ + Σ_{j≤c} M_{j,c}(k_j·ξ)k_j + λ_c ξ`, so `H_t` is never formed.
pub fn forward_chunkwise(batch: &SequenceBatch, cfg: &LayerConfig) -> Result<(Vec<f64>, ForwardState)> {
    run(batch, cfg, false)
}

/// As [`forward_chunkwise`], also keeping the final Chebyshev iterate pair per position.
pub fn forward_chunkwise_with_tails(batch: &SequenceBatch, cfg: &LayerConfig) -> Result<(Vec<f64>, ForwardState)> {
    run(batch, cfg, true)
}
