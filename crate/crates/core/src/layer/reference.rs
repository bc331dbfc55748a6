//! Token-by-token reference: explicit `D×D` states, dense solves, and plain
//! reverse accumulation for the gradients. Slow, but shares no chunk logic
//! with the fast path, which makes it a useful oracle.

use rayon::prelude::*;

use super::backward::normalize_backward;
use super::batch::{GradientBundle, SequenceBatch, UpstreamGrads};
use super::config::{AlphaPlacement, InnerSolver, LayerConfig};
use super::forward::solve_system;
use super::plan::{lambda_for, prepare_head, LambdaBounds, PreparedHead};
use crate::error::{GkaError, Result};
use crate::numerics::{dot, Matrix};
use crate::solvers::{LinearOperator, Shifted};

#[derive(Debug, Clone)]
pub struct ReferenceHead {
    pub prep: PreparedHead,
    /// `H_t`, `U_t` after each token.
    pub h: Vec<Matrix>,
    pub u: Vec<Matrix>,
    pub norms: Vec<f64>,
    pub lambdas: Vec<LambdaBounds>,
    pub x_hat: Vec<f64>,
    pub combined: Vec<f64>,
    pub y: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct ReferenceState {
    pub cfg: LayerConfig,
    pub heads: usize,
    pub time: usize,
    pub dim: usize,
    pub per_head: Vec<ReferenceHead>,
}

fn forward_head(prep: PreparedHead, cfg: &LayerConfig) -> std::result::Result<ReferenceHead, (usize, GkaError)> {
    let (d, p, time) = (prep.dim, cfg.precision, prep.time);
    let mut hs = Matrix::zeros(d, d);
    let mut us = Matrix::zeros(d, d);
    let mut out = ReferenceHead {
        h: Vec::with_capacity(time),
        u: Vec::with_capacity(time),
        norms: Vec::with_capacity(time),
        lambdas: Vec::with_capacity(time),
        x_hat: vec![0.0; time * d],
        combined: vec![0.0; time * d],
        y: vec![0.0; time * d],
        prep,
    };
    let prep = &out.prep;
    for t in 0..time {
        let r = t * d..(t + 1) * d;
        let (k, v, q) = (&prep.k[r.clone()], &prep.v[r.clone()], &prep.q[r.clone()]);
        let g = prep.gamma[t];
        hs.scale(g);
        hs.add_outer(1.0, k, k);
        hs.round(p);
        us.scale(g);
        us.add_outer(1.0, v, k);
        us.round(p);
        let norm = p.round(hs.frobenius_norm());
        let lb = lambda_for(norm, cfg);
        let op = Shifted::new(&hs, lb.lambda);
        let x = solve_system(&op, q, &lb, cfg, p).map_err(|e| (t, e))?;
        let a = prep.alpha[t];
        let comb: Vec<f64> = x.iter().zip(q).map(|(xv, qv)| p.round(a * xv + (1.0 - a) * qv)).collect();
        let mut y = vec![0.0; d];
        match cfg.alpha_placement {
            AlphaPlacement::BeforeProjection => us.apply(&comb, &mut y, p),
            AlphaPlacement::AfterProjection => {
                let mut ux = vec![0.0; d];
                let mut uq = vec![0.0; d];
                us.apply(&x, &mut ux, p);
                us.apply(q, &mut uq, p);
                for i in 0..d {
                    y[i] = p.round(a * ux[i] + (1.0 - a) * uq[i]);
                }
            }
        }
        out.x_hat[r.clone()].copy_from_slice(&x);
        out.combined[r.clone()].copy_from_slice(&comb);
        out.y[r].copy_from_slice(&y);
        out.h.push(hs.clone());
        out.u.push(us.clone());
        out.norms.push(norm);
        out.lambdas.push(lb);
    }
    Ok(out)
}

/// Sequential forward pass with the given inner solver (the configured one is overridden).
pub fn forward_sequential_reference(
    batch: &SequenceBatch,
    cfg: &LayerConfig,
    solver: InnerSolver,
) -> Result<(Vec<f64>, ReferenceState)> {
    let cfg = LayerConfig {
        solver,
        chunk_size: 1,
        ..cfg.clone()
    };
    cfg.validate()?;
    batch.validate()?;
    if batch.dim != cfg.head_dim {
        return Err(GkaError::shape("forward_sequential_reference head_dim", cfg.head_dim, batch.dim));
    }
    let per_head = (0..batch.heads_total())
        .into_par_iter()
        .map(|bh| {
            forward_head(prepare_head(&batch.head(bh), &cfg), &cfg)
                .map_err(|(t, e)| e.at(bh / batch.heads, bh % batch.heads, t))
        })
        .collect::<Result<Vec<_>>>()?;
    let y = per_head.iter().flat_map(|h| h.y.iter().copied()).collect();
    Ok((
        y,
        ReferenceState {
            cfg,
            heads: batch.heads,
            time: batch.time,
            dim: batch.dim,
            per_head,
        },
    ))
}

fn backward_head(
    rh: &ReferenceHead,
    cfg: &LayerConfig,
    dy: &[f64],
    dx_direct: Option<&[f64]>,
) -> std::result::Result<[Vec<f64>; 5], (usize, GkaError)> {
    let (d, time) = (rh.prep.dim, rh.prep.time);
    let prep = &rh.prep;
    let mut dq = vec![0.0; time * d];
    let mut dk = vec![0.0; time * d];
    let mut dv = vec![0.0; time * d];
    let mut dg = vec![0.0; time];
    let mut da = vec![0.0; time];
    let mut dh_bar = Matrix::zeros(d, d);
    let mut du_bar = Matrix::zeros(d, d);
    let zero = Matrix::zeros(d, d);
    for t in (0..time).rev() {
        let r = t * d..(t + 1) * d;
        let (k, v, q, x) = (&prep.k[r.clone()], &prep.v[r.clone()], &prep.q[r.clone()], &rh.x_hat[r.clone()]);
        let (h, u) = (&rh.h[t], &rh.u[t]);
        let dyt = &dy[r.clone()];
        let mut dcomb = vec![0.0; d];
        u.matvec_transpose_into(dyt, &mut dcomb);
        let a = prep.alpha[t];
        da[t] = x.iter().zip(q).zip(&dcomb).map(|((xv, qv), g)| (xv - qv) * g).sum::<f64>() * a * (1.0 - a);
        let mut dxt: Vec<f64> = dcomb.iter().map(|g| a * g).collect();
        if let Some(extra) = dx_direct {
            dxt.iter_mut().zip(&extra[r.clone()]).for_each(|(p, e)| *p += e);
        }
        let lb = rh.lambdas[t];
        let op = Shifted::new(h, lb.lambda);
        let z = solve_system(&op, &dxt, &lb, cfg, cfg.precision).map_err(|e| (t, e))?;
        for i in 0..d {
            dq[t * d + i] = z[i] + (1.0 - a) * dcomb[i];
        }
        let norm = rh.norms[t];
        let w = if norm > 0.0 { 2.0 * lb.dlambda_dnorm * dot(x, &z) / norm } else { 0.0 };

        // dH̄_t = dH_t + γ_{t+1} dH̄_{t+1}, with dH_t = −z xᵀ − ½ w H_t.
        let next_gamma = if t + 1 < time { prep.gamma[t + 1] } else { 0.0 };
        dh_bar.scale(next_gamma);
        dh_bar.add_outer(-1.0, &z, x);
        dh_bar.add_scaled(-0.5 * w, h);
        du_bar.scale(next_gamma);
        du_bar.add_outer(1.0, dyt, &rh.combined[r.clone()]);

        let mut a1 = vec![0.0; d];
        let mut a2 = vec![0.0; d];
        let mut a3 = vec![0.0; d];
        dh_bar.matvec_into(k, &mut a1);
        dh_bar.matvec_transpose_into(k, &mut a2);
        du_bar.matvec_transpose_into(v, &mut a3);
        for i in 0..d {
            dk[t * d + i] = a1[i] + a2[i] + a3[i];
        }
        du_bar.matvec_into(k, &mut dv[r]);
        let (hp, up) = if t > 0 { (&rh.h[t - 1], &rh.u[t - 1]) } else { (&zero, &zero) };
        dg[t] = prep.gamma[t] * (dh_bar.frobenius_dot(hp) + du_bar.frobenius_dot(up));
    }
    if let Some(norms) = &prep.q_norms {
        normalize_backward(&prep.q[..time * d], &norms[..time], &mut dq, d);
    }
    if let Some(norms) = &prep.k_norms {
        normalize_backward(&prep.k[..time * d], &norms[..time], &mut dk, d);
    }
    Ok([dq, dk, dv, dg, da])
}

/// Reverse-mode gradients of the sequential reference, through explicit states.
pub fn backward_sequential_reference(state: &ReferenceState, up: &UpstreamGrads) -> Result<GradientBundle> {
    let (t, d) = (state.time, state.dim);
    let total = state.per_head.len() * t * d;
    if up.dy.len() != total {
        return Err(GkaError::shape("backward_sequential_reference dy", total, up.dy.len()));
    }
    let heads = state
        .per_head
        .par_iter()
        .enumerate()
        .map(|(bh, rh)| {
            let r = bh * t * d..(bh + 1) * t * d;
            backward_head(rh, &state.cfg, &up.dy[r.clone()], up.dx.as_ref().map(|x| &x[r]))
                .map_err(|(pos, e)| e.at(bh / state.heads, bh % state.heads, pos))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut out = GradientBundle {
        dq: Vec::with_capacity(total),
        dk: Vec::with_capacity(total),
        dv: Vec::with_capacity(total),
        d_log_gates: Vec::new(),
        d_alpha_logits: Vec::new(),
    };
    for [dq, dk, dv, dg, da] in heads {
        out.dq.extend(dq);
        out.dk.extend(dk);
        out.dv.extend(dv);
        out.d_log_gates.extend(dg);
        out.d_alpha_logits.extend(da);
    }
    Ok(out)
}

