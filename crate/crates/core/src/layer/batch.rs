use crate::error::{GkaError, Result};
use crate::numerics::SeededRng;

/// Queries, keys, values, log-gates and α-logits for a `(batch, head, time, dim)` block.
///
/// Vectors are stored row-major in `(b, h, t, d)` order; scalars per token in
/// `(b, h, t)` order. Gates are kept in log space: `γ_t = exp(g_t)`, so
/// `g_t ≤ 0` and `g_t = −∞` encodes a full reset.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceBatch {
    pub batch: usize,
    pub heads: usize,
    pub time: usize,
    pub dim: usize,
    pub q: Vec<f64>,
    pub k: Vec<f64>,
    pub v: Vec<f64>,
    pub log_gates: Vec<f64>,
    pub alpha_logits: Vec<f64>,
}

impl SequenceBatch {
    pub fn zeros(batch: usize, heads: usize, time: usize, dim: usize) -> Self {
        let n = batch * heads * time;
        SequenceBatch {
            batch,
            heads,
            time,
            dim,
            q: vec![0.0; n * dim],
            k: vec![0.0; n * dim],
            v: vec![0.0; n * dim],
            log_gates: vec![0.0; n],
            alpha_logits: vec![0.0; n],
        }
    }

    /// Standard-normal `q, k, v`, gates uniform in `gates = (lo, hi)`, α-logits standard normal.
    pub fn random(batch: usize, heads: usize, time: usize, dim: usize, gates: (f64, f64), rng: &mut SeededRng) -> Self {
        let mut b = SequenceBatch::zeros(batch, heads, time, dim);
        let mut r = rng.fork("q");
        b.q.iter_mut().for_each(|x| *x = r.normal());
        let mut r = rng.fork("k");
        b.k.iter_mut().for_each(|x| *x = r.normal());
        let mut r = rng.fork("v");
        b.v.iter_mut().for_each(|x| *x = r.normal());
        let mut r = rng.fork("gates");
        b.log_gates.iter_mut().for_each(|x| *x = r.uniform_range(gates.0, gates.1).ln());
        let mut r = rng.fork("alpha");
        b.alpha_logits.iter_mut().for_each(|x| *x = r.normal());
        b
    }

    pub fn heads_total(&self) -> usize {
        self.batch * self.heads
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.heads_total() * self.time;
        for (name, len, want) in [
            ("q", self.q.len(), n * self.dim),
            ("k", self.k.len(), n * self.dim),
            ("v", self.v.len(), n * self.dim),
            ("log_gates", self.log_gates.len(), n),
            ("alpha_logits", self.alpha_logits.len(), n),
        ] {
            if len != want {
                return Err(GkaError::shape(name, want, len));
            }
        }
        if let Some(g) = self.log_gates.iter().find(|g| g.is_nan() || **g > 0.0) {
            return Err(GkaError::InvalidParameter(format!("log-gate must be <= 0, got {g}")));
        }
        if let Some(a) = self.alpha_logits.iter().find(|a| a.is_nan()) {
            return Err(GkaError::InvalidParameter(format!("alpha-logit is {a}")));
        }
        for x in self.q.iter().chain(&self.k).chain(&self.v) {
            if !x.is_finite() {
                return Err(GkaError::InvalidParameter("non-finite q/k/v entry".into()));
            }
        }
        Ok(())
    }

    /// Copy of the `(b, h)` head as a standalone sequence.
    pub fn head(&self, bh: usize) -> HeadInputs {
        let (t, d) = (self.time, self.dim);
        let vec = |x: &[f64]| x[bh * t * d..(bh + 1) * t * d].to_vec();
        let sc = |x: &[f64]| x[bh * t..(bh + 1) * t].to_vec();
        HeadInputs {
            time: t,
            dim: d,
            q: vec(&self.q),
            k: vec(&self.k),
            v: vec(&self.v),
            log_gates: sc(&self.log_gates),
            alpha_logits: sc(&self.alpha_logits),
        }
    }
}

/// One head's inputs, `(t, d)` row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadInputs {
    pub time: usize,
    pub dim: usize,
    pub q: Vec<f64>,
    pub k: Vec<f64>,
    pub v: Vec<f64>,
    pub log_gates: Vec<f64>,
    pub alpha_logits: Vec<f64>,
}

/// Gradients flowing into the layer.
#[derive(Debug, Clone, PartialEq)]
pub struct UpstreamGrads {
    /// `dL/dy_t`, shaped like the values.
    pub dy: Vec<f64>,
    /// Optional extra `dL/dx̂_t`, for testing the solve in isolation.
    pub dx: Option<Vec<f64>>,
}

impl UpstreamGrads {
    pub fn from_dy(dy: Vec<f64>) -> Self {
        UpstreamGrads { dy, dx: None }
    }
}

/// Gradients with respect to every layer input.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientBundle {
    pub dq: Vec<f64>,
    pub dk: Vec<f64>,
    pub dv: Vec<f64>,
    pub d_log_gates: Vec<f64>,
    pub d_alpha_logits: Vec<f64>,
}

impl GradientBundle {
    pub fn zeros_like(b: &SequenceBatch) -> Self {
        GradientBundle {
            dq: vec![0.0; b.q.len()],
            dk: vec![0.0; b.k.len()],
            dv: vec![0.0; b.v.len()],
            d_log_gates: vec![0.0; b.log_gates.len()],
            d_alpha_logits: vec![0.0; b.alpha_logits.len()],
        }
    }

    pub fn is_finite(&self) -> bool {
        self.groups().iter().all(|(_, g)| g.iter().all(|x| x.is_finite()))
    }

    /// `(name, values)` for each parameter group, in a fixed order.
    pub fn groups(&self) -> [(&'static str, &[f64]); 5] {
        [
            ("q", &self.dq),
            ("k", &self.dk),
            ("v", &self.dv),
            ("log_gates", &self.d_log_gates),
            ("alpha_logits", &self.d_alpha_logits),
        ]
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
