//! MQAR sweeps over mixers, learning rates and seeds.

use std::collections::BTreeMap;
use std::path::Path;

use anyhow::Result;
use gka::layer::Regularization;
use gka::numerics::Precision;
use gka_mqar::checkpoint::save_checkpoint;
use gka_mqar::train::{median, train_run};
use gka_mqar::{AlphaMode, MixerKind, ModelConfig, MqarConfig, RunResult, TrainConfig};
use serde::{Deserialize, Serialize};

pub const SCHEMA: &str = "gka-mqar-runs/1";
pub const HEADER: [&str; 10] = [
    "mixer",
    "lr",
    "seed",
    "accuracy",
    "final_loss",
    "steps",
    "diverged",
    "spikes",
    "median_grad_norm",
    "max_grad_norm",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MqarRunConfig {
    pub task: MqarConfig,
    pub mixers: Vec<MixerKind>,
    pub d_model: usize,
    pub head_dim: usize,
    pub train: TrainConfig,
    /// Model seeds; each one trains the whole learning-rate grid.
    pub seeds: Vec<u64>,
    /// Replaces the memory layer's regularization when set.
    pub regularization: Option<Regularization>,
    pub iters: Option<usize>,
    pub precision: Precision,
    pub alpha: AlphaMode,
    pub checkpoint: bool,
}

impl Default for MqarRunConfig {
    fn default() -> Self {
        MqarRunConfig {
            task: MqarConfig::default(),
            mixers: vec![MixerKind::Gka],
            d_model: 64,
            head_dim: 16,
            train: TrainConfig::default(),
            seeds: vec![0],
            regularization: None,
            iters: None,
            precision: Precision::Full,
            alpha: AlphaMode::Learned,
            checkpoint: true,
        }
    }
}

impl MqarRunConfig {
    pub fn model(&self, kind: MixerKind) -> ModelConfig {
        let mut m = ModelConfig::new(kind, self.task.vocab, self.d_model, self.head_dim);
        let layer = &mut m.mixer.layer;
        if let Some(r) = self.regularization {
            layer.regularization = r;
        }
        if let Some(i) = self.iters {
            layer.iters = i;
        }
        layer.precision = self.precision;
        m.mixer.alpha = self.alpha;
        m
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MqarRow {
    pub mixer: String,
    pub lr: f64,
    pub seed: u64,
    pub accuracy: f64,
    pub final_loss: f64,
    pub steps: usize,
    pub diverged: bool,
    pub spikes: usize,
    pub median_grad_norm: f64,
    pub max_grad_norm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixerSummary {
    /// Best-over-learning-rate accuracy per seed.
    pub best_per_seed: Vec<f64>,
    pub best_lr_per_seed: Vec<f64>,
    pub median_best_accuracy: f64,
    pub diverged_runs: usize,
    pub parameters: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MqarSummary {
    pub config: MqarRunConfig,
    pub mixers: BTreeMap<String, MixerSummary>,
    pub runs: Vec<RunResult>,
}

fn row(kind: MixerKind, r: &RunResult) -> MqarRow {
    MqarRow {
        mixer: kind.to_string(),
        lr: r.lr,
        seed: r.seed,
        accuracy: r.accuracy,
        final_loss: r.final_loss,
        steps: r.steps_run,
        diverged: r.diverged.is_some(),
        spikes: r.spikes.len(),
        median_grad_norm: median(&r.grad_norms),
        max_grad_norm: r.grad_norms.iter().cloned().fold(0.0, f64::max),
    }
}

/// Trains every `(mixer, seed, lr)` combination. Best models are checkpointed
/// under `out/checkpoints/<mixer>` when `out` is given.
pub fn run_mqar(cfg: &MqarRunConfig, out: Option<&Path>) -> Result<(Vec<MqarRow>, MqarSummary)> {
    cfg.task.validate()?;
    cfg.train.validate()?;
    let mut rows = Vec::new();
    let mut runs = Vec::new();
    let mut mixers = BTreeMap::new();
    for kind in &cfg.mixers {
        let model_cfg = cfg.model(*kind);
        let mut best_per_seed = Vec::new();
        let mut best_lr_per_seed = Vec::new();
        let mut diverged_runs = 0;
        let mut parameters = 0;
        for seed in &cfg.seeds {
            let train = TrainConfig {
                seed: *seed,
                ..cfg.train.clone()
            };
            let mut best: Option<(f64, f64)> = None;
            for lr in &train.learning_rates {
                let (r, model) = train_run(&model_cfg, &cfg.task, &train, *lr)?;
                parameters = model.num_params();
                diverged_runs += r.diverged.is_some() as usize;
                if best.is_none_or(|(a, _)| r.accuracy > a) {
                    best = Some((r.accuracy, *lr));
                    if let (Some(dir), true) = (out, cfg.checkpoint && *seed == cfg.seeds[0]) {
                        save_checkpoint(&dir.join("checkpoints").join(kind.as_str()), &model, *seed)?;
                    }
                }
                rows.push(row(*kind, &r));
                runs.push(r);
            }
            let (acc, lr) = best.unwrap_or((0.0, f64::NAN));
            best_per_seed.push(acc);
            best_lr_per_seed.push(lr);
        }
        mixers.insert(
            kind.to_string(),
            MixerSummary {
                median_best_accuracy: median(&best_per_seed),
                best_per_seed,
                best_lr_per_seed,
                diverged_runs,
                parameters,
            },
        );
    }
    Ok((
        rows,
        MqarSummary {
            config: cfg.clone(),
            mixers,
            runs,
        },
    ))
}
