//! Sequential Kalman-filter oracles and baseline recurrences.
//!
//! States map keys to values: `S k ≈ v`, with `S` of shape `(d_v, d_k)`.

use crate::error::{GkaError, Result};
use crate::numerics::{Cholesky, Matrix, Precision};

/// Recursive least-squares state with its inverse Hessian.
#[derive(Debug, Clone, PartialEq)]
pub struct KfState {
    pub s: Matrix,
    /// `(Σ η_i k_i k_iᵀ + λI)^{-1}`, maintained by rank-one Woodbury updates.
    pub phi: Matrix,
    pub precision: Precision,
    /// Keep `Φ` fixed at its initial value.
    pub frozen_covariance: bool,
    /// Steps skipped because `1/η + kᵀΦk` was not positive and finite.
    pub breakdowns: usize,
}

impl KfState {
    /// `S_0 = 0`, `Φ_0 = I/λ`.
    pub fn new(d_k: usize, d_v: usize, lambda: f64) -> Result<Self> {
        if !(lambda > 0.0) {
            return Err(GkaError::InvalidParameter(format!("lambda must be positive, got {lambda}")));
        }
        Ok(KfState {
            s: Matrix::zeros(d_v, d_k),
            phi: Matrix::scaled_identity(d_k, 1.0 / lambda),
            precision: Precision::Full,
            frozen_covariance: false,
            breakdowns: 0,
        })
    }

    pub fn with_precision(mut self, p: Precision) -> Self {
        self.precision = p;
        self.phi.round(p);
        self
    }

    /// `Φ ≡ I`: the gain collapses to `k/(1/η + kᵀk)`.
    pub fn frozen_identity(d_k: usize, d_v: usize) -> Self {
        KfState {
            s: Matrix::zeros(d_v, d_k),
            phi: Matrix::identity(d_k),
            precision: Precision::Full,
            frozen_covariance: true,
            breakdowns: 0,
        }
    }

    /// One measurement `(k, v)` with weight `η`:
    ///
    /// ```text
    /// S ← S − (S k − v) kᵀΦ / (1/η + kᵀΦk)
    /// Φ ← Φ − Φ k kᵀ Φ / (1/η + kᵀΦk)
    /// ```
    ///
    /// `η = 0` leaves the state untouched. A non-positive denominator is
    /// counted as a breakdown and the step is skipped.
    pub fn step(&mut self, k: &[f64], v: &[f64], eta: f64) -> Result<()> {
        let (dv, dk) = self.s.shape();
        if k.len() != dk || v.len() != dv {
            return Err(GkaError::shape("kf_step", format!("k[{dk}], v[{dv}]"), format!("k[{}], v[{}]", k.len(), v.len())));
        }
        if eta == 0.0 {
            return Ok(());
        }
        let p = self.precision;
        let phi_k = self.phi.matvec(k, p)?;
        let denom = p.round(p.round(1.0 / eta) + p.dot(k, &phi_k));
        if !(denom > 0.0) || !denom.is_finite() {
            self.breakdowns += 1;
            return Ok(());
        }
        let innov: Vec<f64> = self
            .s
            .matvec(k, p)?
            .iter()
            .zip(v)
            .map(|(sk, vv)| p.round(sk - vv))
            .collect();
        // Φ is symmetric, so kᵀΦ = (Φk)ᵀ.
        let gain: Vec<f64> = phi_k.iter().map(|x| p.round(x / denom)).collect();
        self.s.add_outer(-1.0, &innov, &gain);
        self.s.round(p);
        if !self.frozen_covariance {
            self.phi.add_outer(-1.0, &phi_k, &gain);
            self.phi.round(p);
        }
        Ok(())
    }

    /// Prediction `S q`.
    pub fn read(&self, q: &[f64]) -> Result<Vec<f64>> {
        self.s.matvec(q, self.precision)
    }
}

/// Free-function form of [`KfState::step`].
pub fn kf_step(state: &mut KfState, k: &[f64], v: &[f64], eta: f64) -> Result<()> {
    state.step(k, v, eta)
}

/// Closed-form minimizer of `λ‖S‖_F² + Σ_i η_i ‖S k_i − v_i‖²`:
/// `S = (Σ η v kᵀ)(Σ η k kᵀ + λI)^{-1}`.
pub fn ridge_state(keys: &[Vec<f64>], values: &[Vec<f64>], etas: &[f64], lambda: f64) -> Result<Matrix> {
    let dk = keys.first().map_or(0, Vec::len);
    let dv = values.first().map_or(0, Vec::len);
    let mut h = Matrix::scaled_identity(dk, lambda);
    let mut u = Matrix::zeros(dv, dk);
    for ((k, v), e) in keys.iter().zip(values).zip(etas) {
        h.add_outer(*e, k, k);
        u.add_outer(*e, v, k);
    }
    // Rows of S solve H sᵢ = uᵢ because H is symmetric.
    let chol = Cholesky::factor(&h)?;
    let mut s = Matrix::zeros(dv, dk);
    for i in 0..dv {
        let row = chol.solve(u.row(i))?;
        s.row_mut(i).copy_from_slice(&row);
    }
    Ok(s)
}

/// Steady-state Kalman filter with identity dynamics, run per value channel
/// with a shared covariance:
///
/// ```text
/// G = Σk / (kᵀΣk + r),   ŝ_i ← ŝ_i + G (v_i − kᵀŝ_i),   Σ ← (I − G kᵀ) Σ
/// ```
///
/// Returns the stacked state (rows `ŝ_iᵀ`) after every step.
pub fn steady_state_kf_run(keys: &[Vec<f64>], values: &[Vec<f64>], noise: &[f64], sigma0: f64) -> Result<Vec<Matrix>> {
    if keys.len() != values.len() || keys.len() != noise.len() {
        return Err(GkaError::shape("steady_state_kf_run", keys.len(), format!("{} values, {} noise", values.len(), noise.len())));
    }
    let dk = keys.first().map_or(0, Vec::len);
    let dv = values.first().map_or(0, Vec::len);
    let mut sigma = Matrix::scaled_identity(dk, sigma0);
    let mut rows = vec![vec![0.0; dk]; dv];
    let mut out = Vec::with_capacity(keys.len());
    let mut sk = vec![0.0; dk];
    for ((k, v), r) in keys.iter().zip(values).zip(noise) {
        sigma.matvec_into(k, &mut sk);
        let denom: f64 = k.iter().zip(&sk).map(|(a, b)| a * b).sum::<f64>() + r;
        let gain: Vec<f64> = sk.iter().map(|x| x / denom).collect();
        for (row, vi) in rows.iter_mut().zip(v) {
            let pred: f64 = k.iter().zip(row.iter()).map(|(a, b)| a * b).sum();
            let innov = vi - pred;
            row.iter_mut().zip(&gain).for_each(|(s, g)| *s += g * innov);
        }
        // (I − G kᵀ)Σ = Σ − G (Σk)ᵀ since Σ is symmetric.
        sigma.add_outer(-1.0, &gain, &sk);
        let mut s = Matrix::zeros(dv, dk);
        for (i, row) in rows.iter().enumerate() {
            s.row_mut(i).copy_from_slice(row);
        }
        out.push(s);
    }
    Ok(out)
}

/// DeltaNet: `S ← S − β (S k − v) kᵀ`.
pub fn deltanet_step(s: &mut Matrix, k: &[f64], v: &[f64], beta: f64) {
    let mut sk = vec![0.0; s.rows()];
    s.matvec_into(k, &mut sk);
    let innov: Vec<f64> = sk.iter().zip(v).map(|(a, b)| a - b).collect();
    s.add_outer(-beta, &innov, k);
}

/// Gated linear attention: `S ← γ S + β v kᵀ`.
pub fn gla_step(s: &mut Matrix, k: &[f64], v: &[f64], gamma: f64, beta: f64) {
    s.scale(gamma);
    s.add_outer(beta, v, k);
}

/// Gated DeltaNet: `S ← γ S (I − β k kᵀ) + β v kᵀ`.
pub fn gdn_step(s: &mut Matrix, k: &[f64], v: &[f64], gamma: f64, beta: f64) {
    let mut sk = vec![0.0; s.rows()];
    s.matvec_into(k, &mut sk);
    s.scale(gamma);
    s.add_outer(-gamma * beta, &sk, k);
    s.add_outer(beta, v, k);
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::SeededRng;

    #[test]
    fn first_step_is_rank_one_ridge() {
        let lambda = 0.3;
        let mut st = KfState::new(3, 2, lambda).unwrap();
        let k = [0.0, 0.6, 0.8];
        let v = [1.5, -2.0];
        st.step(&k, &v, 1.0).unwrap();
        let want = Matrix::outer(&v, &k).scaled(1.0 / (1.0 + lambda));
        assert!(st.s.max_abs_diff(&want) < 1e-15);
    }

    #[test]
    fn zero_weight_is_a_no_op() {
        let mut rng = SeededRng::new(1);
        let mut st = KfState::new(4, 4, 1.0).unwrap();
        st.step(&rng.unit_vector(4), &rng.normal_vec(4), 1.0).unwrap();
        let before = st.clone();
        st.step(&rng.unit_vector(4), &rng.normal_vec(4), 0.0).unwrap();
        assert_eq!(st, before);
    }

    #[test]
    fn shape_errors() {
        let mut st = KfState::new(3, 2, 1.0).unwrap();
        assert!(st.step(&[1.0, 0.0], &[1.0, 1.0], 1.0).is_err());
        assert!(KfState::new(3, 2, 0.0).is_err());
    }

    #[test]
    fn exact_measurement_recovers_the_value() {
        let k = vec![vec![1.0, 0.0, 0.0]];
        let v = vec![vec![2.5, -1.0]];
        let s = steady_state_kf_run(&k, &v, &[1e-12], 1.0).unwrap();
        assert!((s[0][(0, 0)] - 2.5).abs() < 1e-10);
        assert!((s[0][(1, 0)] + 1.0).abs() < 1e-10);
    }

    #[test]
    fn gla_with_unit_gates_accumulates() {
        let mut rng = SeededRng::new(2);
        let mut s = Matrix::zeros(3, 3);
        let mut want = Matrix::zeros(3, 3);
        for _ in 0..10 {
            let (k, v) = (rng.normal_vec(3), rng.normal_vec(3));
            gla_step(&mut s, &k, &v, 1.0, 1.0);
            want.add_outer(1.0, &v, &k);
        }
        assert!(s.max_abs_diff(&want) < 1e-13);
    }

    #[test]
    fn gdn_with_unit_gate_is_deltanet() {
        let mut rng = SeededRng::new(3);
        let mut a = Matrix::zeros(4, 4);
        let mut b = Matrix::zeros(4, 4);
        for _ in 0..20 {
            let (k, v) = (rng.unit_vector(4), rng.normal_vec(4));
            let beta = rng.uniform();
            gdn_step(&mut a, &k, &v, 1.0, beta);
            deltanet_step(&mut b, &k, &v, beta);
        }
        assert!(a.max_abs_diff(&b) <= 1e-12);
    }
}
