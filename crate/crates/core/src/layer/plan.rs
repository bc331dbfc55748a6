//! Chunk bookkeeping shared by the forward and backward passes.

use super::batch::{sigmoid, HeadInputs, SequenceBatch};
use super::config::{LayerConfig, Regularization};
use crate::error::Result;
use crate::numerics::{Matrix, Precision};
use crate::solvers::{LinearOperator, SpectralBounds};

/// One head after normalization and right-padding to a multiple of the chunk size.
#[derive(Debug, Clone)]
pub struct PreparedHead {
    pub time: usize,
    pub padded: usize,
    pub dim: usize,
    /// Queries and keys as seen by the recurrence (unit norm when normalization is on).
    pub q: Vec<f64>,
    pub k: Vec<f64>,
    pub v: Vec<f64>,
    pub gamma: Vec<f64>,
    pub alpha: Vec<f64>,
    /// Pre-normalization norms; `None` when normalization is off.
    pub q_norms: Option<Vec<f64>>,
    pub k_norms: Option<Vec<f64>>,
}

fn normalize_rows(x: &mut [f64], dim: usize, p: Precision) -> Vec<f64> {
    x.chunks_mut(dim)
        .map(|row| {
            let n = p.dot(row, row).sqrt();
            if n > 0.0 {
                row.iter_mut().for_each(|v| *v = p.round(*v / n));
            }
            n
        })
        .collect()
}

pub fn prepare_head(h: &HeadInputs, cfg: &LayerConfig) -> PreparedHead {
    let p = cfg.precision;
    let (t, d) = (h.time, h.dim);
    let padded = cfg.padded_len(t);
    let pad = |x: &[f64], width: usize, fill: f64| {
        let mut out: Vec<f64> = x.iter().map(|v| p.round(*v)).collect();
        out.resize(padded * width, fill);
        out
    };
    let mut q = pad(&h.q, d, 0.0);
    let mut k = pad(&h.k, d, 0.0);
    let v = pad(&h.v, d, 0.0);
    let gamma = pad(&h.log_gates.iter().map(|g| g.exp()).collect::<Vec<_>>(), 1, 1.0);
    let alpha = pad(&h.alpha_logits.iter().map(|a| sigmoid(*a)).collect::<Vec<_>>(), 1, 0.0);
    let (q_norms, k_norms) = if cfg.normalize_qk {
        (Some(normalize_rows(&mut q, d, p)), Some(normalize_rows(&mut k, d, p)))
    } else {
        (None, None)
    };
    PreparedHead {
        time: t,
        padded,
        dim: d,
        q,
        k,
        v,
        gamma,
        alpha,
        q_norms,
        k_norms,
    }
}

/// Cumulative products `ζ_c = ∏_{i≤c} γ_i` and the decay mask
/// `M[j][c] = ∏_{j<i≤c} γ_i` (zero below the diagonal, one on it).
///
/// Running products are exact for `γ = 0`, where ratios `ζ_c/ζ_j` are not.
pub fn decay_products(gamma: &[f64], p: Precision) -> (Vec<f64>, Matrix) {
    let c = gamma.len();
    let mut zeta = Vec::with_capacity(c);
    let mut acc = 1.0;
    for g in gamma {
        acc = p.round(acc * g);
        zeta.push(acc);
    }
    let mut mask = Matrix::zeros(c, c);
    for j in 0..c {
        let mut m = 1.0;
        mask.as_mut_slice()[j * c + j] = 1.0;
        for col in j + 1..c {
            m = p.round(m * gamma[col]);
            mask.as_mut_slice()[j * c + col] = m;
        }
    }
    (zeta, mask)
}

/// Per-chunk quantities cached by the forward pass.
#[derive(Debug, Clone)]
pub struct ChunkData {
    pub start: usize,
    pub zeta: Vec<f64>,
    pub mask: Matrix,
    /// State entering the chunk (`H` and `U` just before its first position).
    pub h0: Matrix,
    pub u0: Matrix,
}

impl ChunkData {
    /// Column `c` of the mask restricted to rows `0..=c`.
    pub fn column(&self, c: usize) -> Vec<f64> {
        (0..=c).map(|j| self.mask[(j, c)]).collect()
    }
}

/// Chunk boundaries, initial states and per-position `‖H_t‖_F` for one head.
#[derive(Debug, Clone)]
pub struct ChunkPlan {
    pub chunk_size: usize,
    pub chunks: Vec<ChunkData>,
    /// `‖H_t‖_F` at every padded position.
    pub norms: Vec<f64>,
    /// How many squared norms came out negative from rounding and were clamped to zero.
    pub clamped: usize,
}

/// `‖H_c‖_F` for every position of a chunk, without forming `H_c`:
///
/// ```text
/// ‖H_c‖² = ζ_c²‖H_0‖² + 2ζ_c Σ_j M_{j,c} k_jᵀH_0k_j + colsum(((G⊙G)M)⊙M)_c,   G = KKᵀ
/// ```
///
/// Returns the norms and the number of clamped negative radicands.
pub fn chunkwise_frobenius(
    h0: &Matrix,
    keys: &[f64],
    dim: usize,
    zeta: &[f64],
    mask: &Matrix,
    p: Precision,
) -> (Vec<f64>, usize) {
    let c = zeta.len();
    let h0n2 = p.round(h0.frobenius_norm().powi(2));
    let mut tmp = vec![0.0; dim];
    let quad: Vec<f64> = keys
        .chunks(dim)
        .map(|k| {
            h0.apply(k, &mut tmp, p);
            p.dot(k, &tmp)
        })
        .collect();
    let mut g2 = Matrix::zeros(c, c);
    for i in 0..c {
        for j in 0..c {
            let g = p.dot(&keys[i * dim..(i + 1) * dim], &keys[j * dim..(j + 1) * dim]);
            g2.as_mut_slice()[i * c + j] = p.round(g * g);
        }
    }
    let mut clamped = 0;
    let norms = (0..c)
        .map(|col| {
            let mut cross = 0.0;
            let mut third = 0.0;
            for i in 0..=col {
                cross += mask[(i, col)] * quad[i];
                let mut inner = 0.0;
                for j in 0..=col {
                    inner += g2[(i, j)] * mask[(j, col)];
                }
                third += p.round(inner) * mask[(i, col)];
            }
            let z = zeta[col];
            let sq = p.round(p.round(z * z * h0n2) + p.round(2.0 * z * p.round(cross)) + p.round(third));
            if sq < 0.0 {
                clamped += 1;
                0.0
            } else {
                p.round(sq.sqrt())
            }
        })
        .collect();
    (norms, clamped)
}

/// Regularization and spectral bounds at one position.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LambdaBounds {
    pub lambda: f64,
    pub mu: f64,
    pub l: f64,
    /// `∂λ/∂‖H‖_F`: `a` on the adaptive branch, zero when floored or constant.
    pub dlambda_dnorm: f64,
}

impl LambdaBounds {
    pub fn bounds(&self) -> SpectralBounds {
        SpectralBounds { mu: self.mu, l: self.l }
    }
}

/// `λ = a·max(norm, floor)`, `μ = λ`, `L = norm + λ`.
pub fn adaptive_lambda(norm: f64, a: f64, floor: f64) -> LambdaBounds {
    let floored = norm < floor;
    let lambda = a * norm.max(floor);
    LambdaBounds {
        lambda,
        mu: lambda,
        l: norm + lambda,
        dlambda_dnorm: if floored { 0.0 } else { a },
    }
}

pub(crate) fn lambda_for(norm: f64, cfg: &LayerConfig) -> LambdaBounds {
    let lb = match cfg.regularization {
        Regularization::Adaptive { a } => adaptive_lambda(norm, a, cfg.norm_floor),
        Regularization::Constant { lambda } => LambdaBounds {
            lambda,
            mu: lambda,
            l: norm + lambda,
            dlambda_dnorm: 0.0,
        },
    };
    let p = cfg.precision;
    LambdaBounds {
        lambda: p.round(lb.lambda),
        mu: p.round(lb.mu),
        l: p.round(lb.l),
        ..lb
    }
}

/// `ξ ↦ ζ H_0 ξ + Σ_j w_j (k_j·ξ) k_j + shift·ξ`: the system at one chunk position.
pub struct ChunkOperator<'a> {
    pub h0: &'a Matrix,
    pub zeta: f64,
    pub keys: &'a [f64],
    pub weights: &'a [f64],
    pub shift: f64,
}

impl LinearOperator for ChunkOperator<'_> {
    fn dim(&self) -> usize {
        self.h0.rows()
    }

    fn apply(&self, x: &[f64], out: &mut [f64], p: Precision) {
        let d = self.dim();
        self.h0.apply(x, out, p);
        if p.is_full() {
            for i in 0..d {
                out[i] = self.zeta * out[i] + self.shift * x[i];
            }
            for (k, w) in self.keys.chunks(d).zip(self.weights) {
                let c = w * p.dot(k, x);
                out.iter_mut().zip(k).for_each(|(o, kv)| *o += c * kv);
            }
            return;
        }
        let z = p.round(self.zeta);
        let s = p.round(self.shift);
        let mut acc = vec![0.0; d];
        for (k, w) in self.keys.chunks(d).zip(self.weights) {
            let c = p.round(w * p.dot(k, x));
            for (a, kv) in acc.iter_mut().zip(k) {
                *a += c * kv;
            }
        }
        for i in 0..d {
            out[i] = p.round(p.round(z * out[i]) + p.round(acc[i]) + p.round(s * x[i]));
        }
    }
}

/// `ζ U_0 ξ + Σ_j w_j (k_j·ξ) v_j`.
pub(crate) fn apply_value_state(
    u0: &Matrix,
    zeta: f64,
    keys: &[f64],
    values: &[f64],
    weights: &[f64],
    x: &[f64],
    p: Precision,
) -> Vec<f64> {
    let d = u0.rows();
    let mut out = vec![0.0; d];
    u0.apply(x, &mut out, p);
    let mut acc = vec![0.0; d];
    for ((k, v), w) in keys.chunks(d).zip(values.chunks(d)).zip(weights) {
        let c = p.round(w * p.dot(k, x));
        for (a, vv) in acc.iter_mut().zip(v) {
            *a += c * vv;
        }
    }
    out.iter().zip(&acc).map(|(o, a)| p.round(p.round(zeta * o) + p.round(*a))).collect()
}

/// `ζ U_0ᵀ ξ + Σ_j w_j (v_j·ξ) k_j` (full precision; used by the backward pass).
pub(crate) fn apply_value_state_transpose(
    u0: &Matrix,
    zeta: f64,
    keys: &[f64],
    values: &[f64],
    weights: &[f64],
    x: &[f64],
) -> Vec<f64> {
    let d = u0.rows();
    let mut out = vec![0.0; d];
    u0.matvec_transpose_into(x, &mut out);
    out.iter_mut().for_each(|o| *o *= zeta);
    for ((k, v), w) in keys.chunks(d).zip(values.chunks(d)).zip(weights) {
        let c = w * crate::numerics::dot(v, x);
        for (o, kv) in out.iter_mut().zip(k) {
            *o += c * kv;
        }
    }
    out
}

/// State after the chunk: `ζ_{C−1} S_0 + Σ_j M_{j,C−1} a_j k_jᵀ`.
fn advance_state(s0: &Matrix, zeta_end: f64, left: &[f64], keys: &[f64], last_col: &[f64], p: Precision) -> Matrix {
    let d = s0.rows();
    let mut s = s0.scaled(zeta_end);
    for ((a, k), w) in left.chunks(d).zip(keys.chunks(d)).zip(last_col) {
        s.add_outer(*w, a, k);
    }
    s.round(p);
    s
}

/// Scan the chunks of a prepared head, producing initial states, decay
/// products and per-position norms.
pub fn plan_head(h: &PreparedHead, cfg: &LayerConfig) -> ChunkPlan {
    let (c, d, p) = (cfg.chunk_size, h.dim, cfg.precision);
    let mut h0 = Matrix::zeros(d, d);
    let mut u0 = Matrix::zeros(d, d);
    let mut chunks = Vec::with_capacity(h.padded / c.max(1));
    let mut norms = Vec::with_capacity(h.padded);
    let mut clamped = 0;
    for start in (0..h.padded).step_by(c) {
        let keys = &h.k[start * d..(start + c) * d];
        let vals = &h.v[start * d..(start + c) * d];
        let (zeta, mask) = decay_products(&h.gamma[start..start + c], p);
        let (n, cl) = chunkwise_frobenius(&h0, keys, d, &zeta, &mask, p);
        norms.extend(n);
        clamped += cl;
        let last: Vec<f64> = (0..c).map(|j| mask[(j, c - 1)]).collect();
        let h_next = advance_state(&h0, zeta[c - 1], keys, keys, &last, p);
        let u_next = advance_state(&u0, zeta[c - 1], vals, keys, &last, p);
        chunks.push(ChunkData {
            start,
            zeta,
            mask,
            h0: std::mem::replace(&mut h0, h_next),
            u0: std::mem::replace(&mut u0, u_next),
        });
    }
    ChunkPlan {
        chunk_size: c,
        chunks,
        norms,
        clamped,
    }
}

/// Chunk plans for every `(batch, head)` pair, in `b·H + h` order.
pub fn chunk_initial_states(batch: &SequenceBatch, cfg: &LayerConfig) -> Result<Vec<ChunkPlan>> {
    cfg.validate()?;
    batch.validate()?;
    Ok((0..batch.heads_total())
        .map(|bh| plan_head(&prepare_head(&batch.head(bh), cfg), cfg))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::SeededRng;

    fn sequential_states(h: &PreparedHead) -> Vec<(Matrix, Matrix)> {
        let d = h.dim;
        let mut hs = Matrix::zeros(d, d);
        let mut us = Matrix::zeros(d, d);
        (0..h.padded)
            .map(|t| {
                let k = &h.k[t * d..(t + 1) * d];
                hs.scale(h.gamma[t]);
                hs.add_outer(1.0, k, k);
                us.scale(h.gamma[t]);
                us.add_outer(1.0, &h.v[t * d..(t + 1) * d], k);
                (hs.clone(), us.clone())
            })
            .collect()
    }

    #[test]
    fn unit_gates_two_basis_keys() {
        let mut hi = HeadInputs {
            time: 2,
            dim: 4,
            q: vec![0.0; 8],
            k: vec![0.0; 8],
            v: vec![0.0; 8],
            log_gates: vec![0.0; 2],
            alpha_logits: vec![0.0; 2],
        };
        hi.k[0] = 1.0;
        hi.k[5] = 1.0;
        let cfg = LayerConfig::new(4).with_chunk_size(2);
        let plan = plan_head(&prepare_head(&hi, &cfg), &cfg);
        assert_eq!(plan.chunks.len(), 1);
        let prep = prepare_head(&hi, &cfg);
        let states = sequential_states(&prep);
        let mut expect = Matrix::zeros(4, 4);
        expect.as_mut_slice()[0] = 1.0;
        expect.as_mut_slice()[5] = 1.0;
        assert_eq!(states[1].0, expect);
        assert!((plan.norms[1] - 2f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn zero_gates_reset_the_state() {
        let mut rng = SeededRng::new(3);
        let mut hi = SequenceBatch::random(1, 1, 8, 3, (0.5, 1.0), &mut rng).head(0);
        hi.log_gates.iter_mut().for_each(|g| *g = f64::NEG_INFINITY);
        let cfg = LayerConfig::new(3).with_chunk_size(4);
        let prep = prepare_head(&hi, &cfg);
        let plan = plan_head(&prep, &cfg);
        let k = &prep.k[3 * 3..4 * 3];
        let expect = Matrix::outer(k, k);
        assert!(plan.chunks[1].h0.max_abs_diff(&expect) == 0.0);
        for c in &plan.chunks {
            for j in 0..4 {
                for col in 0..4 {
                    assert_eq!(c.mask[(j, col)], if j == col { 1.0 } else { 0.0 });
                }
            }
        }
        // Every norm is that of a single unit rank-one term.
        assert!(plan.norms[..8].iter().all(|n| (n - 1.0).abs() < 1e-12));
    }

    #[test]
    fn chunk_states_match_token_recurrence() {
        let mut rng = SeededRng::new(4);
        let hi = SequenceBatch::random(1, 1, 64, 6, (0.7, 1.0), &mut rng).head(0);
        let cfg = LayerConfig::new(6).with_chunk_size(16).with_normalize_qk(false);
        let prep = prepare_head(&hi, &cfg);
        let plan = plan_head(&prep, &cfg);
        let states = sequential_states(&prep);
        for (n, ch) in plan.chunks.iter().enumerate().skip(1) {
            let (hs, us) = &states[n * 16 - 1];
            assert!(ch.h0.max_abs_diff(hs) <= 1e-10 * hs.frobenius_norm());
            assert!(ch.u0.max_abs_diff(us) <= 1e-10 * us.frobenius_norm());
        }
        for (t, (hs, _)) in states.iter().enumerate() {
            let want = hs.frobenius_norm();
            assert!((plan.norms[t] - want).abs() <= 1e-10 * want);
        }
    }

    #[test]
    fn frobenius_single_unit_key() {
        let h0 = Matrix::zeros(3, 3);
        let (zeta, mask) = decay_products(&[1.0], Precision::Full);
        let (n, cl) = chunkwise_frobenius(&h0, &[0.0, 1.0, 0.0], 3, &zeta, &mask, Precision::Full);
        assert_eq!((n, cl), (vec![1.0], 0));
    }

    #[test]
    fn frobenius_pure_decay_of_identity() {
        let h0 = Matrix::identity(4);
        let gamma = [0.9, 0.5, 1.0, 0.25];
        let (zeta, mask) = decay_products(&gamma, Precision::Full);
        let (n, _) = chunkwise_frobenius(&h0, &[0.0; 16], 4, &zeta, &mask, Precision::Full);
        for (x, z) in n.iter().zip(&zeta) {
            assert!((x - 2.0 * z).abs() < 1e-15);
        }
    }

    #[test]
    fn frobenius_random_chunk() {
        let mut rng = SeededRng::new(5);
        let d = 8;
        let c = 16;
        let base = rng.normal_matrix(d, d);
        let h0 = crate::numerics::gram(&base, Precision::Full);
        let keys = rng.normal_vec(c * d);
        let gamma: Vec<f64> = (0..c).map(|_| rng.uniform_range(0.3, 1.0)).collect();
        let (zeta, mask) = decay_products(&gamma, Precision::Full);
        let (n, cl) = chunkwise_frobenius(&h0, &keys, d, &zeta, &mask, Precision::Full);
        assert_eq!(cl, 0);
        let mut h = h0.clone();
        for t in 0..c {
            h.scale(gamma[t]);
            h.add_outer(1.0, &keys[t * d..(t + 1) * d], &keys[t * d..(t + 1) * d]);
            let want = h.frobenius_norm();
            assert!((n[t] - want).abs() <= 1e-10 * want);
        }
    }

    #[test]
    fn decay_mask_structure() {
        let gamma = [0.5, 0.8, 0.0, 0.9];
        let (zeta, m) = decay_products(&gamma, Precision::Full);
        assert_eq!(zeta, vec![0.5, 0.4, 0.0, 0.0]);
        assert_eq!(m[(0, 1)], 0.8);
        assert_eq!(m[(0, 3)], 0.0);
        assert_eq!(m[(2, 3)], 0.9);
        assert_eq!(m[(3, 0)], 0.0);
        for j in 0..4 {
            assert_eq!(m[(j, j)], 1.0);
        }
    }

    #[test]
    fn lambda_examples() {
        let lb = adaptive_lambda(1.0, 0.02, 1e-6);
        assert!((lb.bounds().kappa() - 51.0).abs() < 1e-12);
        let lb = adaptive_lambda(10.0, 0.1, 1e-6);
        assert!((lb.lambda - 1.0).abs() < 1e-15 && (lb.l - 11.0).abs() < 1e-14);
        assert!((lb.bounds().kappa() - 11.0).abs() < 1e-12);
        let lb = adaptive_lambda(0.0, 0.02, 1e-6);
        assert_eq!(lb.lambda, 0.02 * 1e-6);
        assert_eq!(lb.mu, lb.l);
        assert_eq!(lb.dlambda_dnorm, 0.0);
    }
}
