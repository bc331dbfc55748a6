//! A small pre-norm sequence model: embedding, `layers` × (mixer, MLP), output head.

use gka::numerics::SeededRng;
use serde::{Deserialize, Serialize};

use crate::data::MqarBatch;
use crate::error::{MqarError, Result};
use crate::mixer::{mixer_backward, mixer_forward, LambdaStats, MixerCache, MixerConfig, MixerKind};
use crate::ops::*;
use crate::params::ParamStore;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab: usize,
    pub d_model: usize,
    pub layers: usize,
    pub mlp_ratio: usize,
    pub mixer: MixerConfig,
    /// Initial forget gate `σ(b_g)`.
    pub initial_gate: f64,
    /// Standard deviation of the output head at initialization.
    pub head_init_std: f64,
}

impl ModelConfig {
    /// Two blocks, `d_model / head_dim` heads.
    pub fn new(kind: MixerKind, vocab: usize, d_model: usize, head_dim: usize) -> Self {
        ModelConfig {
            vocab,
            d_model,
            layers: 2,
            mlp_ratio: 2,
            mixer: MixerConfig::new(kind, (d_model / head_dim).max(1), head_dim),
            initial_gate: 0.95,
            head_init_std: 0.02,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(MqarError::InvalidConfig(m));
        if self.vocab < 2 || self.d_model == 0 || self.layers == 0 || self.mlp_ratio == 0 {
            return bad(format!("degenerate sizes in {self:?}"));
        }
        if self.mixer.heads == 0 || self.mixer.head_dim == 0 || self.mixer.conv_width == 0 {
            return bad("mixer needs heads, head_dim and conv_width > 0".into());
        }
        if !(self.initial_gate > 0.0 && self.initial_gate < 1.0) {
            return bad(format!("initial_gate {} outside (0, 1)", self.initial_gate));
        }
        Ok(())
    }

    fn hidden(&self) -> usize {
        self.mlp_ratio * self.d_model
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyModel {
    pub cfg: ModelConfig,
    pub params: ParamStore,
}

struct BlockCache {
    h_in: Vec<f64>,
    inv1: Vec<f64>,
    mix: MixerCache,
    h_mid: Vec<f64>,
    b: Vec<f64>,
    inv2: Vec<f64>,
    pre: Vec<f64>,
    act: Vec<f64>,
}

struct Cache {
    blocks: Vec<BlockCache>,
    h_out: Vec<f64>,
    inv_f: Vec<f64>,
    zq: Vec<f64>,
    qpos: Vec<usize>,
}

/// Loss, accuracy counts and regularizer statistics for one batch.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct BatchStats {
    pub loss: f64,
    pub correct: usize,
    pub queries: usize,
    pub lambda: LambdaStats,
}

fn block(i: usize) -> String {
    format!("block{i}.")
}

impl ToyModel {
    /// Each tensor draws from its own stream forked from `seed` by name.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let root = SeededRng::new(seed).fork("init");
        let d = cfg.d_model;
        let mut params = ParamStore::default();
        let normal = |params: &mut ParamStore, name: String, shape: Vec<usize>, std: f64| {
            let mut r = root.fork(&name);
            let n = shape.iter().product();
            let data = (0..n).map(|_| std * r.normal()).collect();
            params.push(name, shape, data);
        };
        normal(&mut params, "embed".into(), vec![cfg.vocab, d], 1.0);
        let gate_bias = (cfg.initial_gate / (1.0 - cfg.initial_gate)).ln();
        for l in 0..cfg.layers {
            let pre = block(l);
            params.push(format!("{pre}norm1"), vec![d], vec![1.0; d]);
            for (name, shape) in cfg.mixer.param_shapes(d) {
                let full = format!("{pre}mixer.{name}");
                match name {
                    "bg" => params.push(full, shape, vec![gate_bias; cfg.mixer.heads]),
                    "ba" | "bb" => params.push(full, shape, vec![0.0; cfg.mixer.heads]),
                    _ => {
                        let fan_in = if name.starts_with("conv") { shape[1] } else { shape[0] };
                        normal(&mut params, full, shape, 1.0 / (fan_in as f64).sqrt());
                    }
                }
            }
            params.push(format!("{pre}norm2"), vec![d], vec![1.0; d]);
            let hid = cfg.hidden();
            normal(&mut params, format!("{pre}mlp.w1"), vec![d, hid], 1.0 / (d as f64).sqrt());
            params.push(format!("{pre}mlp.b1"), vec![hid], vec![0.0; hid]);
            normal(&mut params, format!("{pre}mlp.w2"), vec![hid, d], 1.0 / (hid as f64).sqrt());
            params.push(format!("{pre}mlp.b2"), vec![d], vec![0.0; d]);
        }
        params.push("norm_f", vec![d], vec![1.0; d]);
        normal(&mut params, "head".into(), vec![d, cfg.vocab], cfg.head_init_std);
        Ok(ToyModel { cfg: cfg.clone(), params })
    }

    pub fn num_params(&self) -> usize {
        self.params.num_params()
    }

    fn forward(&self, data: &MqarBatch) -> Result<(Vec<f64>, Cache)> {
        let cfg = &self.cfg;
        let (d, n) = (cfg.d_model, data.tokens.len());
        let (bsz, time) = (data.batch, data.seq_len);
        let emb = self.params.get("embed");
        let mut h = Vec::with_capacity(n * d);
        for tok in &data.tokens {
            if *tok >= cfg.vocab {
                return Err(MqarError::InvalidConfig(format!("token {tok} outside vocab {}", cfg.vocab)));
            }
            h.extend_from_slice(&emb[tok * d..(tok + 1) * d]);
        }
        let mut blocks = Vec::with_capacity(cfg.layers);
        for l in 0..cfg.layers {
            let pre = block(l);
            let h_in = h;
            let (a, inv1) = rmsnorm(&h_in, d, self.params.get(&format!("{pre}norm1")));
            let (m, mix) = mixer_forward(&self.params, &format!("{pre}mixer."), &cfg.mixer, &a, bsz, time)?;
            let h_mid: Vec<f64> = h_in.iter().zip(&m).map(|(x, y)| x + y).collect();
            let (b, inv2) = rmsnorm(&h_mid, d, self.params.get(&format!("{pre}norm2")));
            let hid = cfg.hidden();
            let mut pre_act = matmul(&b, n, self.params.get(&format!("{pre}mlp.w1")), d, hid);
            add_bias(&mut pre_act, self.params.get(&format!("{pre}mlp.b1")));
            let act = silu(&pre_act);
            let mut f = matmul(&act, n, self.params.get(&format!("{pre}mlp.w2")), hid, d);
            add_bias(&mut f, self.params.get(&format!("{pre}mlp.b2")));
            h = h_mid.iter().zip(&f).map(|(x, y)| x + y).collect();
            blocks.push(BlockCache {
                h_in,
                inv1,
                mix,
                h_mid,
                b,
                inv2,
                pre: pre_act,
                act,
            });
        }
        let qpos = data.query_positions();
        let h_q: Vec<f64> = qpos.iter().flat_map(|p| h[p * d..(p + 1) * d].to_vec()).collect();
        let (zq, inv_f) = rmsnorm(&h_q, d, self.params.get("norm_f"));
        let logits = matmul(&zq, qpos.len(), self.params.get("head"), d, cfg.vocab);
        Ok((
            logits,
            Cache {
                blocks,
                h_out: h_q,
                inv_f,
                zq,
                qpos,
            },
        ))
    }

    /// Logits at the query positions, in flat position order.
    pub fn query_logits(&self, data: &MqarBatch) -> Result<Vec<f64>> {
        Ok(self.forward(data)?.0)
    }

    pub fn evaluate(&self, data: &MqarBatch) -> Result<BatchStats> {
        let (logits, cache) = self.forward(data)?;
        Ok(self.stats(&logits, &cache, data).0)
    }

    fn stats(&self, logits: &[f64], cache: &Cache, data: &MqarBatch) -> (BatchStats, Vec<f64>) {
        let targets: Vec<usize> = cache.qpos.iter().map(|p| data.targets[*p]).collect();
        let (loss, dlogits, correct) = cross_entropy(logits, self.cfg.vocab, &targets);
        let lambda = cache
            .blocks
            .iter()
            .map(|b| b.mix.lambda_stats())
            .fold(LambdaStats::default(), LambdaStats::merge);
        (
            BatchStats {
                loss,
                correct,
                queries: targets.len(),
                lambda,
            },
            dlogits,
        )
    }

    /// Mean query cross-entropy and its gradient with respect to every parameter.
    pub fn loss_and_grad(&self, data: &MqarBatch) -> Result<(BatchStats, ParamStore)> {
        let (logits, cache) = self.forward(data)?;
        let (stats, dlogits) = self.stats(&logits, &cache, data);
        if !stats.loss.is_finite() {
            return Err(MqarError::NonFinite {
                step: 0,
                diagnostics: format!("loss {} with lambda {:?}", stats.loss, stats.lambda),
            });
        }
        let grads = self.backward(data, &cache, &dlogits)?;
        Ok((stats, grads))
    }

    fn backward(&self, data: &MqarBatch, cache: &Cache, dlogits: &[f64]) -> Result<ParamStore> {
        let cfg = &self.cfg;
        let (d, v, hid) = (cfg.d_model, cfg.vocab, cfg.hidden());
        let n = data.tokens.len();
        let nq = cache.qpos.len();
        let mut grads = self.params.zeros_like();
        let head = self.params.get("head");
        let hi = grads.index("head");
        matmul_grad_weight(&cache.zq, dlogits, nq, d, v, &mut grads.tensors[hi].data);
        let dzq = matmul_grad_input(dlogits, nq, head, d, v);
        let fi = grads.index("norm_f");
        let dhq = rmsnorm_backward(&cache.h_out, &cache.inv_f, d, self.params.get("norm_f"), &dzq, &mut grads.tensors[fi].data);
        let mut dh = vec![0.0; n * d];
        for (r, p) in cache.qpos.iter().enumerate() {
            dh[p * d..(p + 1) * d].copy_from_slice(&dhq[r * d..(r + 1) * d]);
        }

        for l in (0..cfg.layers).rev() {
            let pre = block(l);
            let bc = &cache.blocks[l];
            let w2 = self.params.get(&format!("{pre}mlp.w2"));
            let i = grads.index(&format!("{pre}mlp.w2"));
            matmul_grad_weight(&bc.act, &dh, n, hid, d, &mut grads.tensors[i].data);
            let i = grads.index(&format!("{pre}mlp.b2"));
            bias_grad(&dh, &mut grads.tensors[i].data);
            let dact = matmul_grad_input(&dh, n, w2, hid, d);
            let dpre = silu_backward(&bc.pre, &dact);
            let i = grads.index(&format!("{pre}mlp.w1"));
            matmul_grad_weight(&bc.b, &dpre, n, d, hid, &mut grads.tensors[i].data);
            let i = grads.index(&format!("{pre}mlp.b1"));
            bias_grad(&dpre, &mut grads.tensors[i].data);
            let db = matmul_grad_input(&dpre, n, self.params.get(&format!("{pre}mlp.w1")), d, hid);
            let i = grads.index(&format!("{pre}norm2"));
            let dmid = rmsnorm_backward(&bc.h_mid, &bc.inv2, d, self.params.get(&format!("{pre}norm2")), &db, &mut grads.tensors[i].data);
            dh.iter_mut().zip(&dmid).for_each(|(a, b)| *a += b);

            let da = mixer_backward(&self.params, &mut grads, &format!("{pre}mixer."), &cfg.mixer, &bc.mix, &dh)?;
            let i = grads.index(&format!("{pre}norm1"));
            let din = rmsnorm_backward(&bc.h_in, &bc.inv1, d, self.params.get(&format!("{pre}norm1")), &da, &mut grads.tensors[i].data);
            dh.iter_mut().zip(&din).for_each(|(a, b)| *a += b);
        }
        let ei = grads.index("embed");
        let demb = &mut grads.tensors[ei].data;
        for (r, tok) in data.tokens.iter().enumerate() {
            demb[tok * d..(tok + 1) * d].iter_mut().zip(&dh[r * d..(r + 1) * d]).for_each(|(a, b)| *a += b);
        }
        Ok(grads)
    }
}
