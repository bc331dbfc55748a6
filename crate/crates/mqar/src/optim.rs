//! Momentum-free adaptive optimizer with global-norm clipping.

use crate::params::ParamStore;

/// `v ← β₂v + (1 − β₂)g²`, `θ ← θ − lr·g / (√(v / (1 − β₂ᵗ)) + ε)`.
#[derive(Debug, Clone)]
pub struct RmsProp {
    pub beta2: f64,
    pub eps: f64,
    /// Rescale gradients whose global norm exceeds this value.
    pub clip: Option<f64>,
    second: Option<ParamStore>,
    steps: i32,
}

impl RmsProp {
    pub fn new(beta2: f64, eps: f64, clip: Option<f64>) -> Self {
        RmsProp {
            beta2,
            eps,
            clip,
            second: None,
            steps: 0,
        }
    }

    pub fn steps(&self) -> i32 {
        self.steps
    }

    /// Applies one update and returns the gradient norm before clipping.
    pub fn step(&mut self, params: &mut ParamStore, grads: &mut ParamStore, lr: f64) -> f64 {
        let norm = grads.global_norm();
        if let Some(c) = self.clip {
            if norm > c {
                grads.scale(c / norm);
            }
        }
        let second = self.second.get_or_insert_with(|| params.zeros_like());
        self.steps += 1;
        let correction = 1.0 - self.beta2.powi(self.steps);
        for ((p, g), v) in params.tensors.iter_mut().zip(&grads.tensors).zip(&mut second.tensors) {
            for ((pi, gi), vi) in p.data.iter_mut().zip(&g.data).zip(&mut v.data) {
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                *pi -= lr * gi / ((*vi / correction).sqrt() + self.eps);
            }
        }
        norm
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_the_learning_rate() {
        let mut p = ParamStore::default();
        p.push("w", vec![3], vec![1.0, -2.0, 0.5]);
        let mut g = p.zeros_like();
        g.tensors[0].data = vec![0.3, -0.01, 0.0];
        let mut opt = RmsProp::new(0.999, 1e-12, None);
        opt.step(&mut p, &mut g, 0.1);
        let got = &p.tensors[0].data;
        assert!((got[0] - 0.9).abs() < 1e-9 && (got[1] + 1.9).abs() < 1e-9 && got[2] == 0.5);
    }

    #[test]
    fn clipping_caps_the_global_norm() {
        let mut p = ParamStore::default();
        p.push("w", vec![2], vec![0.0, 0.0]);
        let mut g = p.zeros_like();
        g.tensors[0].data = vec![3.0, 4.0];
        let mut opt = RmsProp::new(0.999, 1e-8, Some(1.0));
        let n = opt.step(&mut p, &mut g, 0.01);
        assert_eq!(n, 5.0);
        assert!((g.global_norm() - 1.0).abs() < 1e-15);
    }
}
