//! Chunk-wise backward pass.
//!
//! With `z_t = (H_t + λ_tI)^{-1} dx̂_t` obtained by the forward solver and
//! `w_t = 2 (∂λ_t/∂‖H_t‖) (x̂_t·z_t)/‖H_t‖_F`, the state adjoints are
//!
//! ```text
//! dH_t = −z_t x̂_tᵀ − ½ w_t H_t,      dU_t = dy_t c_tᵀ
//! ```
//!
//! and every input gradient is a decayed sum of these over `t ≥ i`. Inside a
//! chunk the sums run over the decay mask; contributions from later chunks
//! arrive through two carried `D×D` matrices, accumulated in a reverse scan.

use rayon::prelude::*;

use super::batch::{GradientBundle, UpstreamGrads};
use super::forward::{solve_system, ForwardState, HeadForward};
use super::plan::{apply_value_state_transpose, ChunkOperator};
use crate::error::{GkaError, Result};
use crate::numerics::{dot, Matrix, Precision};
use crate::solvers::LinearOperator;

/// Per-position quantities from the solve adjoint.
struct SolveAdjoint {
    z: Vec<f64>,
    w: Vec<f64>,
    /// `⟨dH_t, H_t⟩ = −x̂_tᵀH_t z_t − ½ w_t ‖H_t‖²`.
    inner_h: Vec<f64>,
    dq: Vec<f64>,
    d_alpha_logit: Vec<f64>,
}

/// Output of the α-split and the implicit solve, for every padded position.
fn backward_dq(hf: &HeadForward, cfg: &crate::layer::LayerConfig, dy: &[f64], dx_direct: Option<&[f64]>, time: usize) -> std::result::Result<SolveAdjoint, (usize, GkaError)> {
    let (c, d) = (cfg.chunk_size, hf.prep.dim);
    let n = hf.prep.padded;
    let mut out = SolveAdjoint {
        z: vec![0.0; n * d],
        w: vec![0.0; n],
        inner_h: vec![0.0; n],
        dq: vec![0.0; n * d],
        d_alpha_logit: vec![0.0; n],
    };
    for ch in &hf.plan.chunks {
        let keys = &hf.prep.k[ch.start * d..(ch.start + c) * d];
        let vals = &hf.prep.v[ch.start * d..(ch.start + c) * d];
        for pos in 0..c {
            let t = ch.start + pos;
            if t >= time {
                break;
            }
            let dyt = &dy[t * d..(t + 1) * d];
            let weights = ch.column(pos);
            let kk = &keys[..(pos + 1) * d];
            let dcomb = apply_value_state_transpose(&ch.u0, ch.zeta[pos], kk, &vals[..(pos + 1) * d], &weights, dyt);
            let a = hf.prep.alpha[t];
            let x = &hf.x_hat[t * d..(t + 1) * d];
            let q = &hf.prep.q[t * d..(t + 1) * d];
            let gap: f64 = x.iter().zip(q).zip(&dcomb).map(|((xv, qv), g)| (xv - qv) * g).sum();
            out.d_alpha_logit[t] = gap * a * (1.0 - a);

            let mut dx: Vec<f64> = dcomb.iter().map(|g| a * g).collect();
            if let Some(extra) = dx_direct {
                dx.iter_mut().zip(&extra[t * d..(t + 1) * d]).for_each(|(v, e)| *v += e);
            }
            let lb = hf.lambdas[t];
            let mut op = ChunkOperator {
                h0: &ch.h0,
                zeta: ch.zeta[pos],
                keys: kk,
                weights: &weights,
                shift: lb.lambda,
            };
            let z = solve_system(&op, &dx, &lb, cfg, cfg.precision).map_err(|e| (t, e))?;
            for i in 0..d {
                out.dq[t * d + i] = z[i] + (1.0 - a) * dcomb[i];
            }
            let norm = hf.plan.norms[t];
            let w = if norm > 0.0 { 2.0 * lb.dlambda_dnorm * dot(x, &z) / norm } else { 0.0 };
            op.shift = 0.0;
            let mut hz = vec![0.0; d];
            op.apply(&z, &mut hz, Precision::Full);
            out.inner_h[t] = -dot(x, &hz) - 0.5 * w * norm * norm;
            out.w[t] = w;
            out.z[t * d..(t + 1) * d].copy_from_slice(&z);
        }
    }
    Ok(out)
}

struct KeyValueGrads {
    dk_h: Vec<f64>,
    dk_u: Vec<f64>,
    dv: Vec<f64>,
}

/// Reverse scan over chunks producing the key gradient through `H` and the
/// key/value gradients through `U`.
///
/// For key `i` in a chunk, with `m_i = M_{i,C−1}`:
///
/// ```text
/// −dk^H_i = m_i S̃ k_i + Σ_{c≥i} M_{i,c}[(x̂_c·k_i) z_c + (z_c·k_i) x̂_c] + b_i H_0k_i + Σ_j (M_w)_{ij}(k_j·k_i) k_j
/// b_i      = Σ_{c≥i} M_{i,c} w_c ζ_c,     M_w = M diag(w) Mᵀ
/// ```
///
/// where `S̃` carries `Σ_{t>chunk} decay·(z_t x̂_tᵀ + x̂_t z_tᵀ + w_t H_t)` from later chunks.
fn backward_dk_dv(hf: &HeadForward, chunk: usize, adj: &SolveAdjoint, dy: &[f64]) -> KeyValueGrads {
    let (c, d) = (chunk, hf.prep.dim);
    let n = hf.prep.padded;
    let mut g = KeyValueGrads {
        dk_h: vec![0.0; n * d],
        dk_u: vec![0.0; n * d],
        dv: vec![0.0; n * d],
    };
    let mut s_carry = Matrix::zeros(d, d);
    let mut q_carry = Matrix::zeros(d, d);
    let mut tmp = vec![0.0; d];
    let row = |_: &[f64], i: usize| i * d..(i + 1) * d;

    for ch in hf.plan.chunks.iter().rev() {
        let s = ch.start;
        let k = &hf.prep.k[s * d..(s + c) * d];
        let v = &hf.prep.v[s * d..(s + c) * d];
        let x = &hf.x_hat[s * d..(s + c) * d];
        let z = &adj.z[s * d..(s + c) * d];
        let cb = &hf.combined[s * d..(s + c) * d];
        let dyc = &dy[s * d..(s + c) * d];
        let w = &adj.w[s..s + c];
        let m = &ch.mask;
        let zeta = &ch.zeta;

        let gram = Matrix::from_fn(c, c, |i, j| dot(&k[row(k, i)], &k[row(k, j)]));
        let mw = Matrix::from_fn(c, c, |i, j| (i.max(j)..c).map(|col| m[(i, col)] * m[(j, col)] * w[col]).sum());
        debug_assert!(mw.max_abs_diff(&mw.transpose()) == 0.0);
        let b: Vec<f64> = (0..c).map(|i| (i..c).map(|col| m[(i, col)] * w[col] * zeta[col]).sum()).collect();

        for i in 0..c {
            let ki = &k[row(k, i)];
            let vi = &v[row(v, i)];
            let last = m[(i, c - 1)];
            let t = s + i;

            let mut acc = vec![0.0; d];
            s_carry.matvec_into(ki, &mut tmp);
            acc.iter_mut().zip(&tmp).for_each(|(a, s)| *a += last * s);
            ch.h0.matvec_into(ki, &mut tmp);
            acc.iter_mut().zip(&tmp).for_each(|(a, h)| *a += b[i] * h);
            for col in i..c {
                let mc = m[(i, col)];
                if mc == 0.0 {
                    continue;
                }
                let (xc, zc) = (&x[row(x, col)], &z[row(z, col)]);
                let (xk, zk) = (mc * dot(xc, ki), mc * dot(zc, ki));
                for r in 0..d {
                    acc[r] += xk * zc[r] + zk * xc[r];
                }
            }
            for j in 0..c {
                let coef = mw[(i, j)] * gram[(i, j)];
                if coef != 0.0 {
                    acc.iter_mut().zip(&k[row(k, j)]).for_each(|(a, kj)| *a += coef * kj);
                }
            }
            g.dk_h[t * d..(t + 1) * d].iter_mut().zip(&acc).for_each(|(o, a)| *o = -a);

            let mut dv = vec![0.0; d];
            q_carry.matvec_into(ki, &mut dv);
            dv.iter_mut().for_each(|x| *x *= last);
            let mut dku = vec![0.0; d];
            q_carry.matvec_transpose_into(vi, &mut dku);
            dku.iter_mut().for_each(|x| *x *= last);
            for col in i..c {
                let mc = m[(i, col)];
                if mc == 0.0 {
                    continue;
                }
                let (dyc_c, cb_c) = (&dyc[row(dyc, col)], &cb[row(cb, col)]);
                let (ck, dv_coef) = (mc * dot(cb_c, ki), mc * dot(dyc_c, vi));
                for r in 0..d {
                    dv[r] += ck * dyc_c[r];
                    dku[r] += dv_coef * cb_c[r];
                }
            }
            g.dv[t * d..(t + 1) * d].copy_from_slice(&dv);
            g.dk_u[t * d..(t + 1) * d].copy_from_slice(&dku);
        }

        let end = zeta[c - 1];
        s_carry.scale(end);
        q_carry.scale(end);
        let mut h0_coef = 0.0;
        for col in 0..c {
            let (xc, zc) = (&x[row(x, col)], &z[row(z, col)]);
            s_carry.add_outer(zeta[col], zc, xc);
            s_carry.add_outer(zeta[col], xc, zc);
            q_carry.add_outer(zeta[col], &dyc[row(dyc, col)], &cb[row(cb, col)]);
            h0_coef += zeta[col] * zeta[col] * w[col];
        }
        s_carry.add_scaled(h0_coef, &ch.h0);
        for j in 0..c {
            let beta: f64 = (j..c).map(|col| zeta[col] * w[col] * m[(j, col)]).sum();
            if beta != 0.0 {
                let kj = &k[row(k, j)];
                s_carry.add_outer(beta, kj, kj);
            }
        }
    }
    g
}

/// Log-gate gradients: `dg_i = Σ_{m≥i} dG_m` with
/// `dG_m = ⟨dH_m, H_m⟩ − ½ k_m·dk^H_m + dy_m·y_m − v_m·dv_m`.
fn backward_dgates(hf: &HeadForward, adj: &SolveAdjoint, kv: &KeyValueGrads, dy: &[f64]) -> Vec<f64> {
    let d = hf.prep.dim;
    let n = hf.prep.padded;
    let mut dg = vec![0.0; n];
    let mut acc = 0.0;
    for t in (0..n).rev() {
        let r = t * d..(t + 1) * d;
        acc += adj.inner_h[t] - 0.5 * dot(&hf.prep.k[r.clone()], &kv.dk_h[r.clone()]) + dot(&dy[r.clone()], &hf.y[r.clone()])
            - dot(&hf.prep.v[r.clone()], &kv.dv[r]);
        dg[t] = acc;
    }
    dg
}

/// Chain a gradient through row-wise `x ↦ x/‖x‖`.
pub(crate) fn normalize_backward(unit: &[f64], norms: &[f64], grad: &mut [f64], dim: usize) {
    for ((u, n), g) in unit.chunks(dim).zip(norms).zip(grad.chunks_mut(dim)) {
        if *n > 0.0 {
            let proj = dot(u, g);
            g.iter_mut().zip(u).for_each(|(gv, uv)| *gv = (*gv - proj * uv) / n);
        } else {
            g.iter_mut().for_each(|gv| *gv = 0.0);
        }
    }
}

struct HeadGrads {
    dq: Vec<f64>,
    dk: Vec<f64>,
    dv: Vec<f64>,
    dg: Vec<f64>,
    da: Vec<f64>,
}

fn backward_head(hf: &HeadForward, cfg: &crate::layer::LayerConfig, dy_in: &[f64], dx: Option<&[f64]>, time: usize) -> std::result::Result<HeadGrads, (usize, GkaError)> {
    let d = hf.prep.dim;
    let n = hf.prep.padded;
    let mut dy = dy_in.to_vec();
    dy.resize(n * d, 0.0);
    let adj = backward_dq(hf, cfg, &dy, dx, time)?;
    let kv = backward_dk_dv(hf, cfg.chunk_size, &adj, &dy);
    let dg = backward_dgates(hf, &adj, &kv, &dy);
    let mut dq = adj.dq.clone();
    let mut dk: Vec<f64> = kv.dk_h.iter().zip(&kv.dk_u).map(|(a, b)| a + b).collect();
    if let Some(norms) = &hf.prep.q_norms {
        normalize_backward(&hf.prep.q, norms, &mut dq, d);
    }
    if let Some(norms) = &hf.prep.k_norms {
        normalize_backward(&hf.prep.k, norms, &mut dk, d);
    }
    let m = time * d;
    Ok(HeadGrads {
        dq: dq[..m].to_vec(),
        dk: dk[..m].to_vec(),
        dv: kv.dv[..m].to_vec(),
        dg: dg[..time].to_vec(),
        da: adj.d_alpha_logit[..time].to_vec(),
    })
}

/// Gradients of every layer input given `dL/dy` (and optionally a direct `dL/dx̂`).
pub fn backward_chunkwise(state: &ForwardState, up: &UpstreamGrads) -> Result<GradientBundle> {
    let (t, d) = (state.time, state.dim);
    let total = state.per_head.len() * t * d;
    if up.dy.len() != total {
        return Err(GkaError::shape("backward_chunkwise dy", total, up.dy.len()));
    }
    if let Some(dx) = &up.dx {
        if dx.len() != total {
            return Err(GkaError::shape("backward_chunkwise dx", total, dx.len()));
        }
    }
    let heads = state
        .per_head
        .par_iter()
        .enumerate()
        .map(|(bh, hf)| {
            let r = bh * t * d..(bh + 1) * t * d;
            let dx = up.dx.as_ref().map(|x| {
                let mut v = x[r.clone()].to_vec();
                v.resize(hf.prep.padded * d, 0.0);
                v
            });
            backward_head(hf, &state.cfg, &up.dy[r], dx.as_deref(), t)
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
    for h in heads {
        out.dq.extend(h.dq);
        out.dk.extend(h.dk);
        out.dv.extend(h.dv);
        out.d_log_gates.extend(h.dg);
        out.d_alpha_logits.extend(h.da);
    }
    Ok(out)
}
