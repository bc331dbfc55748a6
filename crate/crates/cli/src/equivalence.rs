//! Oracle suites: chunk-wise against sequential, Kalman filter against ridge
//! regression, and the reductions between recurrences.

use anyhow::Result;
use gka::kf::{deltanet_step, gdn_step, gla_step, ridge_state, KfState};
use gka::layer::{
    backward_chunkwise, backward_sequential_reference, forward_chunkwise, forward_sequential_reference, LayerConfig, SequenceBatch,
    UpstreamGrads,
};
use gka::numerics::{max_abs_diff, norm2, Matrix, SeededRng};
use serde::{Deserialize, Serialize};

use crate::report::Check;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EquivalenceConfig {
    pub batches: usize,
    pub batch: usize,
    pub heads: usize,
    pub time: usize,
    pub chunk_sizes: Vec<usize>,
    pub dims: Vec<usize>,
    pub kf_time: usize,
    pub kf_dim: usize,
    pub seed: u64,
}

impl Default for EquivalenceConfig {
    fn default() -> Self {
        EquivalenceConfig {
            batches: 20,
            batch: 2,
            heads: 2,
            time: 256,
            chunk_sizes: vec![8, 16, 64],
            dims: vec![8, 16, 32],
            kf_time: 64,
            kf_dim: 16,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EquivalenceReport {
    pub config: EquivalenceConfig,
    pub checks: Vec<Check>,
}

/// `max |a − b| / ‖b‖`.
pub fn max_rel(a: &[f64], b: &[f64]) -> f64 {
    max_abs_diff(a, b) / norm2(b).max(1e-300)
}

/// Worst forward and backward discrepancy over random batches, cycling
/// through the chunk sizes and head dimensions.
pub fn chunk_vs_sequential(cfg: &EquivalenceConfig, with_backward: bool) -> Result<(f64, f64)> {
    let root = SeededRng::new(cfg.seed).fork("chunk-vs-seq");
    let (mut fwd, mut bwd) = (0.0f64, 0.0f64);
    for i in 0..cfg.batches {
        let c = cfg.chunk_sizes[i % cfg.chunk_sizes.len()];
        let d = cfg.dims[(i / cfg.chunk_sizes.len()) % cfg.dims.len()];
        let mut rng = root.fork_index(i as u64);
        let b = SequenceBatch::random(cfg.batch, cfg.heads, cfg.time, d, (0.8, 1.0), &mut rng);
        let lc = LayerConfig::new(d).with_chunk_size(c);
        let (yc, sc) = forward_chunkwise(&b, &lc)?;
        let (ys, ss) = forward_sequential_reference(&b, &lc, lc.solver)?;
        fwd = fwd.max(max_rel(&yc, &ys));
        if with_backward {
            let up = UpstreamGrads::from_dy(rng.fork("dy").normal_vec(yc.len()));
            let gc = backward_chunkwise(&sc, &up)?;
            let gs = backward_sequential_reference(&ss, &up)?;
            for ((_, a), (_, r)) in gc.groups().iter().zip(gs.groups().iter()) {
                bwd = bwd.max(max_rel(a, r));
            }
        }
    }
    Ok((fwd, bwd))
}

/// Worst entrywise gap between the Kalman trajectory and the ridge minimizer.
pub fn kf_vs_ridge(t: usize, d: usize, lambda: f64, seed: u64) -> Result<f64> {
    let mut rng = SeededRng::new(seed).fork("kf-vs-ridge");
    let keys: Vec<Vec<f64>> = (0..t).map(|_| rng.unit_vector(d)).collect();
    let values: Vec<Vec<f64>> = (0..t).map(|_| rng.normal_vec(d)).collect();
    let etas = vec![1.0; t];
    let mut st = KfState::new(d, d, lambda)?;
    let mut worst = 0.0f64;
    for i in 0..t {
        st.step(&keys[i], &values[i], etas[i])?;
        let want = ridge_state(&keys[..=i], &values[..=i], &etas[..=i], lambda)?;
        worst = worst.max(st.s.max_abs_diff(&want));
    }
    Ok(worst)
}

/// `(DeltaNet vs identity-covariance Kalman, GDN(γ=1) vs DeltaNet, GLA(γ=β=1) vs Σ v kᵀ)`.
pub fn reductions(t: usize, d: usize, seed: u64) -> (f64, f64, f64) {
    let mut rng = SeededRng::new(seed).fork("reductions");
    let mut kf = KfState::frozen_identity(d, d);
    let (mut dn, mut gdn, mut gla, mut acc) = (Matrix::zeros(d, d), Matrix::zeros(d, d), Matrix::zeros(d, d), Matrix::zeros(d, d));
    let (mut e1, mut e2, mut e3) = (0.0f64, 0.0f64, 0.0f64);
    for _ in 0..t {
        let k = rng.unit_vector(d);
        let v = rng.normal_vec(d);
        let r = 0.05 + 3.0 * rng.uniform();
        let beta = 1.0 / (1.0 + r);
        kf.step(&k, &v, 1.0 / r).expect("shapes match");
        deltanet_step(&mut dn, &k, &v, beta);
        gdn_step(&mut gdn, &k, &v, 1.0, beta);
        gla_step(&mut gla, &k, &v, 1.0, 1.0);
        acc.add_outer(1.0, &v, &k);
        e1 = e1.max(kf.s.max_abs_diff(&dn));
        e2 = e2.max(gdn.max_abs_diff(&dn));
        e3 = e3.max(gla.max_abs_diff(&acc));
    }
    (e1, e2, e3)
}

pub fn run_equivalence(cfg: &EquivalenceConfig) -> Result<EquivalenceReport> {
    let (fwd, bwd) = chunk_vs_sequential(cfg, true)?;
    let kf = kf_vs_ridge(cfg.kf_time, cfg.kf_dim, 0.1, cfg.seed)?;
    let (e1, e2, e3) = reductions(cfg.kf_time, cfg.kf_dim, cfg.seed);
    Ok(EquivalenceReport {
        config: cfg.clone(),
        checks: vec![
            Check::at_most("chunk vs sequential forward", fwd, 1e-8),
            Check::at_most("chunk vs sequential gradients", bwd, 1e-8),
            Check::at_most("kalman vs ridge minimizer", kf, 1e-8),
            Check::at_most("deltanet vs identity-covariance kalman", e1, 1e-12),
            Check::at_most("gated deltanet at unit gate vs deltanet", e2, 1e-12),
            Check::at_most("linear attention accumulator", e3, 1e-12),
        ],
    })
}
