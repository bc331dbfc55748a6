use super::backward::backward_chunkwise;
use super::batch::{GradientBundle, SequenceBatch, UpstreamGrads};
use super::config::LayerConfig;
use super::forward::forward_chunkwise;
use crate::error::Result;
use crate::numerics::{dot, norm2, SeededRng};

/// Comparison of one parameter group against central differences.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupCheck {
    pub name: &'static str,
    /// `‖analytic − numeric‖ / ‖numeric‖` (absolute when the numeric gradient vanishes).
    pub rel_err: f64,
    pub max_abs_err: f64,
    pub numeric_norm: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FdReport {
    pub step: f64,
    pub groups: Vec<GroupCheck>,
}

impl FdReport {
    pub fn max_rel_err(&self) -> f64 {
        self.groups.iter().map(|g| g.rel_err).fold(0.0, f64::max)
    }

    /// Groups whose relative error exceeds `tol`.
    pub fn failures(&self, tol: f64) -> Vec<&GroupCheck> {
        self.groups.iter().filter(|g| g.rel_err > tol).collect()
    }
}

/// Central-difference check of [`backward_chunkwise`] on the scalar loss
/// `Σ_t ⟨c_t, y_t⟩` with `c` drawn from `loss_seed`.
pub fn finite_difference_check(batch: &SequenceBatch, cfg: &LayerConfig, loss_seed: u64, step: f64) -> Result<FdReport> {
    let (y, state) = forward_chunkwise(batch, cfg)?;
    let c = SeededRng::new(loss_seed).normal_vec(y.len());
    let analytic = backward_chunkwise(&state, &UpstreamGrads::from_dy(c.clone()))?;
    let loss = |b: &SequenceBatch| -> Result<f64> { Ok(dot(&c, &forward_chunkwise(b, cfg)?.0)) };

    let mut numeric = GradientBundle::zeros_like(batch);
    type Field = fn(&mut SequenceBatch) -> &mut Vec<f64>;
    let fields: [(Field, usize); 5] = [
        (|b| &mut b.q, 0),
        (|b| &mut b.k, 1),
        (|b| &mut b.v, 2),
        (|b| &mut b.log_gates, 3),
        (|b| &mut b.alpha_logits, 4),
    ];
    for (field, slot) in fields {
        let mut probe = batch.clone();
        let n = field(&mut probe).len();
        for i in 0..n {
            let orig = field(&mut probe)[i];
            field(&mut probe)[i] = orig + step;
            let lp = loss(&probe)?;
            field(&mut probe)[i] = orig - step;
            let lm = loss(&probe)?;
            field(&mut probe)[i] = orig;
            let g = (lp - lm) / (2.0 * step);
            match slot {
                0 => numeric.dq[i] = g,
                1 => numeric.dk[i] = g,
                2 => numeric.dv[i] = g,
                3 => numeric.d_log_gates[i] = g,
                _ => numeric.d_alpha_logits[i] = g,
            }
        }
    }
    Ok(compare(&analytic, &numeric, step))
}

/// Per-group comparison of two gradient bundles (`reference` is the denominator).
pub fn compare(candidate: &GradientBundle, reference: &GradientBundle, step: f64) -> FdReport {
    let groups = candidate
        .groups()
        .iter()
        .zip(reference.groups())
        .map(|((name, a), (_, n))| {
            let diff: Vec<f64> = a.iter().zip(n).map(|(x, y)| x - y).collect();
            let nn = norm2(n);
            let dn = norm2(&diff);
            GroupCheck {
                name,
                rel_err: if nn > 0.0 { dn / nn } else { dn },
                max_abs_err: diff.iter().fold(0.0, |m, x| m.max(x.abs())),
                numeric_norm: nn,
            }
        })
        .collect();
    FdReport { step, groups }
}
