//! Sequence mixers: the gated ridge-regression layer and recurrent baselines.

use std::fmt;
use std::str::FromStr;

use gka::layer::{backward_chunkwise, forward_chunkwise, ForwardState, LayerConfig, SequenceBatch, UpstreamGrads};
use gka::numerics::dot;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{MqarError, Result};
use crate::ops::*;
use crate::params::ParamStore;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MixerKind {
    /// Chunk-wise gated ridge regression from the `gka` crate.
    Gka,
    /// Gated linear attention: `S ← γS + v kᵀ`.
    Gla,
    /// `S ← S − β(Sk − v)kᵀ`.
    DeltaNet,
    /// Gated DeltaNet: `S ← γS(I − βkkᵀ) + βvkᵀ`.
    Gdn,
}

impl MixerKind {
    pub const ALL: [MixerKind; 4] = [MixerKind::Gka, MixerKind::Gla, MixerKind::DeltaNet, MixerKind::Gdn];

    pub fn as_str(self) -> &'static str {
        match self {
            MixerKind::Gka => "gka",
            MixerKind::Gla => "gla",
            MixerKind::DeltaNet => "deltanet",
            MixerKind::Gdn => "gdn",
        }
    }

    pub fn gated(self) -> bool {
        !matches!(self, MixerKind::DeltaNet)
    }

    pub fn delta_rule(self) -> bool {
        matches!(self, MixerKind::DeltaNet | MixerKind::Gdn)
    }
}

impl fmt::Display for MixerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for MixerKind {
    type Err = MqarError;

    fn from_str(s: &str) -> Result<Self> {
        MixerKind::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| MqarError::InvalidConfig(format!("unknown mixer {s:?}")))
    }
}

/// How the layer's α gate is produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlphaMode {
    /// `α = σ(W_α x + b_α)`.
    #[default]
    Learned,
    /// `α ≡ 0`: the layer reads its state with the raw query.
    Zero,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixerConfig {
    pub kind: MixerKind,
    pub heads: usize,
    pub head_dim: usize,
    pub conv_width: usize,
    /// Inner layer settings for [`MixerKind::Gka`]; `head_dim` is overwritten.
    pub layer: LayerConfig,
    #[serde(default)]
    pub alpha: AlphaMode,
}

impl MixerConfig {
    pub fn new(kind: MixerKind, heads: usize, head_dim: usize) -> Self {
        MixerConfig {
            kind,
            heads,
            head_dim,
            conv_width: 4,
            layer: LayerConfig::new(head_dim).with_chunk_size(16),
            alpha: AlphaMode::Learned,
        }
    }

    pub fn inner_dim(&self) -> usize {
        self.heads * self.head_dim
    }

    fn layer_config(&self) -> LayerConfig {
        let mut c = self.layer.clone();
        c.head_dim = self.head_dim;
        c
    }

    /// `(name, shape)` of every parameter, without the block prefix.
    pub fn param_shapes(&self, d_model: usize) -> Vec<(&'static str, Vec<usize>)> {
        let (hd, h, w) = (self.inner_dim(), self.heads, self.conv_width);
        let mut v = vec![
            ("wq", vec![d_model, hd]),
            ("wk", vec![d_model, hd]),
            ("wv", vec![d_model, hd]),
            ("conv_q", vec![hd, w]),
            ("conv_k", vec![hd, w]),
            ("conv_v", vec![hd, w]),
            ("wo", vec![hd, d_model]),
        ];
        if self.kind.gated() {
            v.push(("wg", vec![d_model, h]));
            v.push(("bg", vec![h]));
        }
        if self.kind == MixerKind::Gka {
            v.push(("wa", vec![d_model, h]));
            v.push(("ba", vec![h]));
        }
        if self.kind.delta_rule() {
            v.push(("wb", vec![d_model, h]));
            v.push(("bb", vec![h]));
        }
        v
    }
}

/// Per-position summary of the regularizer, for diagnostics.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LambdaStats {
    pub min: f64,
    pub mean: f64,
    pub max: f64,
    pub count: usize,
}

impl LambdaStats {
    pub fn from_values(v: &[f64]) -> Self {
        if v.is_empty() {
            return LambdaStats::default();
        }
        LambdaStats {
            min: v.iter().cloned().fold(f64::INFINITY, f64::min),
            max: v.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
            mean: v.iter().sum::<f64>() / v.len() as f64,
            count: v.len(),
        }
    }

    pub fn merge(self, o: LambdaStats) -> Self {
        if self.count == 0 {
            return o;
        }
        if o.count == 0 {
            return self;
        }
        let n = self.count + o.count;
        LambdaStats {
            min: self.min.min(o.min),
            max: self.max.max(o.max),
            mean: (self.mean * self.count as f64 + o.mean * o.count as f64) / n as f64,
            count: n,
        }
    }
}

enum Inner {
    Layer(Box<ForwardState>),
    Recurrent(RecurrentCache),
}

pub struct MixerCache {
    batch: usize,
    time: usize,
    x: Vec<f64>,
    qp: Vec<f64>,
    kp: Vec<f64>,
    vp: Vec<f64>,
    gate_logits: Vec<f64>,
    beta_logits: Vec<f64>,
    y: Vec<f64>,
    inner: Inner,
}

impl MixerCache {
    pub fn lambda_stats(&self) -> LambdaStats {
        match &self.inner {
            Inner::Layer(st) => LambdaStats::from_values(&st.lambdas()),
            Inner::Recurrent(_) => LambdaStats::default(),
        }
    }
}

fn p<'a>(params: &'a ParamStore, prefix: &str, name: &str) -> &'a [f64] {
    params.get(&format!("{prefix}{name}"))
}

fn linear(x: &[f64], n: usize, w: &[f64], din: usize, dout: usize, b: Option<&[f64]>) -> Vec<f64> {
    let mut y = matmul(x, n, w, din, dout);
    if let Some(b) = b {
        add_bias(&mut y, b);
    }
    y
}

/// Mixer output for `x` of shape `(batch·time, d_model)`.
pub fn mixer_forward(
    params: &ParamStore,
    prefix: &str,
    cfg: &MixerConfig,
    x: &[f64],
    batch: usize,
    time: usize,
) -> Result<(Vec<f64>, MixerCache)> {
    let n = batch * time;
    let d = x.len() / n;
    let (h, dh, hd, w) = (cfg.heads, cfg.head_dim, cfg.inner_dim(), cfg.conv_width);
    let qp = matmul(x, n, p(params, prefix, "wq"), d, hd);
    let kp = matmul(x, n, p(params, prefix, "wk"), d, hd);
    let vp = matmul(x, n, p(params, prefix, "wv"), d, hd);
    let q = causal_conv(&qp, batch, time, hd, p(params, prefix, "conv_q"), w);
    let k = causal_conv(&kp, batch, time, hd, p(params, prefix, "conv_k"), w);
    let v = causal_conv(&vp, batch, time, hd, p(params, prefix, "conv_v"), w);
    let gate_logits = if cfg.kind.gated() {
        linear(x, n, p(params, prefix, "wg"), d, h, Some(p(params, prefix, "bg")))
    } else {
        Vec::new()
    };
    let alpha_logits = if cfg.kind == MixerKind::Gka && cfg.alpha == AlphaMode::Learned {
        linear(x, n, p(params, prefix, "wa"), d, h, Some(p(params, prefix, "ba")))
    } else {
        Vec::new()
    };
    let beta_logits = if cfg.kind.delta_rule() {
        linear(x, n, p(params, prefix, "wb"), d, h, Some(p(params, prefix, "bb")))
    } else {
        Vec::new()
    };
    // Per-token scalars arrive as (b, t, h); the heads layout wants (b, h, t).
    let scalars = |s: &[f64], f: &dyn Fn(f64) -> f64| to_heads(&s.iter().map(|v| f(*v)).collect::<Vec<_>>(), batch, time, h, 1);

    let (y_heads, inner) = match cfg.kind {
        MixerKind::Gka => {
            let mut sb = SequenceBatch::zeros(batch, h, time, dh);
            sb.q = to_heads(&q, batch, time, h, dh);
            sb.k = to_heads(&k, batch, time, h, dh);
            sb.v = to_heads(&v, batch, time, h, dh);
            sb.log_gates = scalars(&gate_logits, &log_sigmoid);
            sb.alpha_logits = match cfg.alpha {
                AlphaMode::Learned => scalars(&alpha_logits, &|a| a),
                AlphaMode::Zero => vec![f64::NEG_INFINITY; n * h],
            };
            let (y, st) = forward_chunkwise(&sb, &cfg.layer_config())?;
            (y, Inner::Layer(Box::new(st)))
        }
        kind => {
            let gammas = if kind.gated() { scalars(&gate_logits, &sigmoid) } else { vec![1.0; n * h] };
            let betas = if kind.delta_rule() { scalars(&beta_logits, &sigmoid) } else { vec![1.0; n * h] };
            let (y, c) = recurrent_forward(
                &to_heads(&q, batch, time, h, dh),
                &to_heads(&k, batch, time, h, dh),
                to_heads(&v, batch, time, h, dh),
                gammas,
                betas,
                kind.delta_rule(),
                batch * h,
                time,
                dh,
            );
            (y, Inner::Recurrent(c))
        }
    };
    let y = from_heads(&y_heads, batch, time, h, dh);
    let out = matmul(&y, n, p(params, prefix, "wo"), hd, d);
    Ok((
        out,
        MixerCache {
            batch,
            time,
            x: x.to_vec(),
            qp,
            kp,
            vp,
            gate_logits,
            beta_logits,
            y,
            inner,
        },
    ))
}

/// Accumulates parameter gradients into `grads` and returns `dL/dx`.
pub fn mixer_backward(
    params: &ParamStore,
    grads: &mut ParamStore,
    prefix: &str,
    cfg: &MixerConfig,
    cache: &MixerCache,
    dout: &[f64],
) -> Result<Vec<f64>> {
    let (batch, time) = (cache.batch, cache.time);
    let n = batch * time;
    let d = cache.x.len() / n;
    let (h, dh, hd, w) = (cfg.heads, cfg.head_dim, cfg.inner_dim(), cfg.conv_width);
    let g = |grads: &mut ParamStore, name: &str| grads.index(&format!("{prefix}{name}"));

    let wo = p(params, prefix, "wo");
    let i = g(grads, "wo");
    matmul_grad_weight(&cache.y, dout, n, hd, d, &mut grads.tensors[i].data);
    let dy = to_heads(&matmul_grad_input(dout, n, wo, hd, d), batch, time, h, dh);

    let back_scalars = |s: &[f64]| from_heads(s, batch, time, h, 1);
    let (dq, dk, dv, dgate, dalpha, dbeta) = match &cache.inner {
        Inner::Layer(st) => {
            let gb = backward_chunkwise(st, &UpstreamGrads::from_dy(dy))?;
            let dlg = back_scalars(&gb.d_log_gates);
            let dgate: Vec<f64> = dlg.iter().zip(&cache.gate_logits).map(|(d, z)| d * (1.0 - sigmoid(*z))).collect();
            let dalpha = match cfg.alpha {
                AlphaMode::Learned => back_scalars(&gb.d_alpha_logits),
                AlphaMode::Zero => Vec::new(),
            };
            (gb.dq, gb.dk, gb.dv, dgate, dalpha, Vec::new())
        }
        Inner::Recurrent(c) => {
            let r = recurrent_backward(c, &dy, cfg.kind.delta_rule(), dh);
            let dgamma = back_scalars(&r.dgamma);
            let dgate = if cfg.kind.gated() {
                dgamma
                    .iter()
                    .zip(&cache.gate_logits)
                    .map(|(d, z)| {
                        let s = sigmoid(*z);
                        d * s * (1.0 - s)
                    })
                    .collect()
            } else {
                Vec::new()
            };
            let dbeta = if cfg.kind.delta_rule() {
                back_scalars(&r.dbeta)
                    .iter()
                    .zip(&cache.beta_logits)
                    .map(|(d, z)| {
                        let s = sigmoid(*z);
                        d * s * (1.0 - s)
                    })
                    .collect()
            } else {
                Vec::new()
            };
            (r.dq, r.dk, r.dv, dgate, Vec::new(), dbeta)
        }
    };

    let mut dx = vec![0.0; n * d];
    let mut add = |v: Vec<f64>| dx.iter_mut().zip(v).for_each(|(a, b)| *a += b);
    for (dproj, pre, conv, wname) in [
        (dq, &cache.qp, "conv_q", "wq"),
        (dk, &cache.kp, "conv_k", "wk"),
        (dv, &cache.vp, "conv_v", "wv"),
    ] {
        let dpost = from_heads(&dproj, batch, time, h, dh);
        let ci = g(grads, conv);
        let dpre = causal_conv_backward(pre, batch, time, hd, p(params, prefix, conv), w, &dpost, &mut grads.tensors[ci].data);
        let wi = g(grads, wname);
        matmul_grad_weight(&cache.x, &dpre, n, d, hd, &mut grads.tensors[wi].data);
        add(matmul_grad_input(&dpre, n, p(params, prefix, wname), d, hd));
    }
    for (ds, wname, bname) in [(dgate, "wg", "bg"), (dalpha, "wa", "ba"), (dbeta, "wb", "bb")] {
        if ds.is_empty() {
            continue;
        }
        let wi = g(grads, wname);
        matmul_grad_weight(&cache.x, &ds, n, d, h, &mut grads.tensors[wi].data);
        let bi = g(grads, bname);
        bias_grad(&ds, &mut grads.tensors[bi].data);
        add(matmul_grad_input(&ds, n, p(params, prefix, wname), d, h));
    }
    Ok(dx)
}

struct RecurrentCache {
    heads_total: usize,
    time: usize,
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    q_norms: Vec<f64>,
    k_norms: Vec<f64>,
    gamma: Vec<f64>,
    beta: Vec<f64>,
    /// `S_t` after every step, `(bh, t, d_v, d_k)`.
    states: Vec<f64>,
}

struct RecurrentGrads {
    dq: Vec<f64>,
    dk: Vec<f64>,
    dv: Vec<f64>,
    dgamma: Vec<f64>,
    dbeta: Vec<f64>,
}

#[allow(clippy::too_many_arguments)]
fn recurrent_forward(
    q: &[f64],
    k: &[f64],
    v: Vec<f64>,
    gamma: Vec<f64>,
    beta: Vec<f64>,
    delta: bool,
    heads_total: usize,
    time: usize,
    d: usize,
) -> (Vec<f64>, RecurrentCache) {
    let (q, q_norms) = l2_normalize(q, d);
    let (k, k_norms) = l2_normalize(k, d);
    let dd = d * d;
    let per_head: Vec<(Vec<f64>, Vec<f64>)> = (0..heads_total)
        .into_par_iter()
        .map(|bh| {
            let mut s = vec![0.0; dd];
            let mut states = Vec::with_capacity(time * dd);
            let mut y = vec![0.0; time * d];
            let mut u = vec![0.0; d];
            for t in 0..time {
                let row = bh * time + t;
                let (kt, vt, qt) = (&k[row * d..(row + 1) * d], &v[row * d..(row + 1) * d], &q[row * d..(row + 1) * d]);
                let (g, b) = (gamma[row], beta[row]);
                if delta {
                    mat_vec(&s, kt, &mut u);
                    for i in 0..d {
                        let coef = b * (vt[i] - g * u[i]);
                        for j in 0..d {
                            s[i * d + j] = g * s[i * d + j] + coef * kt[j];
                        }
                    }
                } else {
                    for i in 0..d {
                        for j in 0..d {
                            s[i * d + j] = g * s[i * d + j] + b * vt[i] * kt[j];
                        }
                    }
                }
                mat_vec(&s, qt, &mut y[t * d..(t + 1) * d]);
                states.extend_from_slice(&s);
            }
            (y, states)
        })
        .collect();
    let mut y = Vec::with_capacity(heads_total * time * d);
    let mut states = Vec::with_capacity(heads_total * time * dd);
    for (yh, sh) in per_head {
        y.extend(yh);
        states.extend(sh);
    }
    (
        y,
        RecurrentCache {
            heads_total,
            time,
            q,
            k,
            v,
            q_norms,
            k_norms,
            gamma,
            beta,
            states,
        },
    )
}

fn mat_vec(s: &[f64], x: &[f64], out: &mut [f64]) {
    let d = x.len();
    for (i, o) in out.iter_mut().enumerate() {
        *o = dot(&s[i * d..(i + 1) * d], x);
    }
}

fn mat_t_vec(s: &[f64], x: &[f64], out: &mut [f64]) {
    let d = x.len();
    out.iter_mut().for_each(|o| *o = 0.0);
    for (i, xi) in x.iter().enumerate() {
        for j in 0..d {
            out[j] += s[i * d + j] * xi;
        }
    }
}

fn recurrent_backward(c: &RecurrentCache, dy: &[f64], delta: bool, d: usize) -> RecurrentGrads {
    let (time, dd) = (c.time, d * d);
    type HeadGrads = (Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>);
    let per_head: Vec<HeadGrads> = (0..c.heads_total)
        .into_par_iter()
        .map(|bh| {
            let mut gs = vec![0.0; dd];
            let zero = vec![0.0; dd];
            let (mut dq, mut dk, mut dv) = (vec![0.0; time * d], vec![0.0; time * d], vec![0.0; time * d]);
            let (mut dgamma, mut dbeta) = (vec![0.0; time], vec![0.0; time]);
            let (mut u, mut gk, mut tmp) = (vec![0.0; d], vec![0.0; d], vec![0.0; d]);
            for t in (0..time).rev() {
                let row = bh * time + t;
                let (kt, vt, qt) = (&c.k[row * d..(row + 1) * d], &c.v[row * d..(row + 1) * d], &c.q[row * d..(row + 1) * d]);
                let dyt = &dy[row * d..(row + 1) * d];
                let st = &c.states[(bh * time + t) * dd..(bh * time + t + 1) * dd];
                let prev = if t == 0 { &zero[..] } else { &c.states[(bh * time + t - 1) * dd..(bh * time + t) * dd] };
                let (g, b) = (c.gamma[row], c.beta[row]);
                for i in 0..d {
                    for j in 0..d {
                        gs[i * d + j] += dyt[i] * qt[j];
                    }
                }
                mat_t_vec(st, dyt, &mut dq[t * d..(t + 1) * d]);
                mat_vec(&gs, kt, &mut gk);
                let dvt = &mut dv[t * d..(t + 1) * d];
                dvt.iter_mut().zip(&gk).for_each(|(o, x)| *o = b * x);
                let gp = dot(&gs, prev);
                let dkt = &mut dk[t * d..(t + 1) * d];
                if delta {
                    mat_vec(prev, kt, &mut u);
                    let gku = dot(&gk, &u);
                    dbeta[t] = gk.iter().zip(vt).zip(&u).map(|((a, v), uu)| a * (v - g * uu)).sum();
                    dgamma[t] = gp - b * gku;
                    // dk = −γβ(Gᵀu + PᵀGk) + β Gᵀv
                    mat_t_vec(&gs, &u, &mut tmp);
                    dkt.iter_mut().zip(&tmp).for_each(|(o, x)| *o = -g * b * x);
                    mat_t_vec(prev, &gk, &mut tmp);
                    dkt.iter_mut().zip(&tmp).for_each(|(o, x)| *o -= g * b * x);
                    mat_t_vec(&gs, vt, &mut tmp);
                    dkt.iter_mut().zip(&tmp).for_each(|(o, x)| *o += b * x);
                    for i in 0..d {
                        for j in 0..d {
                            gs[i * d + j] = g * (gs[i * d + j] - b * gk[i] * kt[j]);
                        }
                    }
                } else {
                    dgamma[t] = gp;
                    mat_t_vec(&gs, vt, &mut tmp);
                    dkt.iter_mut().zip(&tmp).for_each(|(o, x)| *o = b * x);
                    gs.iter_mut().for_each(|x| *x *= g);
                }
            }
            (dq, dk, dv, dgamma, dbeta)
        })
        .collect();
    let mut out = RecurrentGrads {
        dq: Vec::new(),
        dk: Vec::new(),
        dv: Vec::new(),
        dgamma: Vec::new(),
        dbeta: Vec::new(),
    };
    for (a, b, cc, e, f) in per_head {
        out.dq.extend(a);
        out.dk.extend(b);
        out.dv.extend(cc);
        out.dgamma.extend(e);
        out.dbeta.extend(f);
    }
    out.dq = l2_normalize_backward(&c.q, &c.q_norms, d, &out.dq);
    out.dk = l2_normalize_backward(&c.k, &c.k_norms, d, &out.dk);
    out
}
