//! Training loop, held-out evaluation and learning-rate sweeps.

use gka::numerics::SeededRng;
use serde::{Deserialize, Serialize};

use crate::data::{evaluation_set, generate_batch, MqarBatch, MqarConfig};
use crate::error::{MqarError, Result};
use crate::mixer::LambdaStats;
use crate::model::{ModelConfig, ToyModel};
use crate::optim::RmsProp;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rates: Vec<f64>,
    pub steps: usize,
    pub batch_size: usize,
    pub eval_size: usize,
    /// Seed for initialization and the training stream.
    pub seed: u64,
    pub clip: f64,
    pub beta2: f64,
    pub eps: f64,
    /// A gradient norm above `spike_factor × median` is reported as a spike.
    pub spike_factor: f64,
    /// Fraction of steps spent in linear warmup; the rest decays on a cosine to zero.
    pub warmup_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rates: lr_grid(1e-4, 1e-2, 4),
            steps: 300,
            batch_size: 32,
            eval_size: 2048,
            seed: 0,
            clip: 1.0,
            beta2: 0.999,
            eps: 1e-8,
            spike_factor: 10.0,
            warmup_fraction: 0.1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.learning_rates.is_empty() {
            return Err(MqarError::InvalidConfig("empty learning-rate grid".into()));
        }
        if let Some(lr) = self.learning_rates.iter().find(|lr| !(1e-4 * (1.0 - 1e-9)..=1e-2 * (1.0 + 1e-9)).contains(*lr)) {
            return Err(MqarError::InvalidConfig(format!("learning rate {lr} outside [1e-4, 1e-2]")));
        }
        if !(0.0..=1.0).contains(&self.warmup_fraction) {
            return Err(MqarError::InvalidConfig("warmup_fraction must lie in [0, 1]".into()));
        }
        if self.batch_size == 0 || self.eval_size == 0 {
            return Err(MqarError::InvalidConfig("batch and evaluation sizes must be positive".into()));
        }
        Ok(())
    }
}

/// Learning rate at `step` for peak `lr`: linear warmup, then cosine decay.
pub fn scheduled_lr(lr: f64, step: usize, steps: usize, warmup_fraction: f64) -> f64 {
    let warmup = (warmup_fraction * steps as f64).round() as usize;
    if step < warmup {
        return lr * (step + 1) as f64 / warmup as f64;
    }
    let span = (steps - warmup).max(1) as f64;
    let progress = (step - warmup) as f64 / span;
    0.5 * lr * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// `n` log-spaced values from `lo` to `hi`.
pub fn lr_grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![lo];
    }
    let (a, b) = (lo.ln(), hi.ln());
    (0..n).map(|i| (a + (b - a) * i as f64 / (n - 1) as f64).exp()).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Spike {
    pub step: usize,
    pub norm: f64,
    pub ratio_to_median: f64,
}

/// Steps whose gradient norm exceeds `factor` times the run's median.
pub fn gradient_spikes(norms: &[f64], factor: f64) -> Vec<Spike> {
    let med = median(norms);
    if !(med > 0.0) {
        return Vec::new();
    }
    norms
        .iter()
        .enumerate()
        .filter(|(_, n)| **n > factor * med)
        .map(|(step, n)| Spike {
            step,
            norm: *n,
            ratio_to_median: n / med,
        })
        .collect()
}

pub fn median(v: &[f64]) -> f64 {
    let mut s: Vec<f64> = v.iter().copied().filter(|x| !x.is_nan()).collect();
    if s.is_empty() {
        return f64::NAN;
    }
    s.sort_by(f64::total_cmp);
    let m = s.len() / 2;
    if s.len() % 2 == 1 {
        s[m]
    } else {
        0.5 * (s[m - 1] + s[m])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub lr: f64,
    pub seed: u64,
    /// Held-out query accuracy; zero for a diverged run.
    pub accuracy: f64,
    pub final_loss: f64,
    pub steps_run: usize,
    /// Diagnostics when the run hit a non-finite loss or gradient.
    pub diverged: Option<String>,
    pub grad_norms: Vec<f64>,
    pub spikes: Vec<Spike>,
    pub lambda: LambdaStats,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub mixer: String,
    pub runs: Vec<RunResult>,
    pub best_lr: f64,
    pub best_accuracy: f64,
}

/// Held-out accuracy over `data`, evaluated in slices of `chunk` sequences.
pub fn accuracy(model: &ToyModel, data: &MqarBatch, chunk: usize) -> Result<(f64, f64)> {
    let (mut correct, mut total, mut loss) = (0usize, 0usize, 0.0);
    let t = data.seq_len;
    for start in (0..data.batch).step_by(chunk.max(1)) {
        let end = (start + chunk).min(data.batch);
        let part = MqarBatch {
            batch: end - start,
            seq_len: t,
            tokens: data.tokens[start * t..end * t].to_vec(),
            targets: data.targets[start * t..end * t].to_vec(),
            query_mask: data.query_mask[start * t..end * t].to_vec(),
        };
        let s = model.evaluate(&part)?;
        correct += s.correct;
        total += s.queries;
        loss += s.loss * s.queries as f64;
    }
    Ok((correct as f64 / total.max(1) as f64, loss / total.max(1) as f64))
}

/// One training run at a fixed learning rate. Returns the trained model too.
pub fn train_run(model_cfg: &ModelConfig, task: &MqarConfig, train: &TrainConfig, lr: f64) -> Result<(RunResult, ToyModel)> {
    task.validate()?;
    train.validate()?;
    let mut model = ToyModel::init(model_cfg, train.seed)?;
    let mut opt = RmsProp::new(train.beta2, train.eps, Some(train.clip));
    let mut stream = SeededRng::new(task.seed).fork("train").fork_index(train.seed);
    let mut norms = Vec::with_capacity(train.steps);
    let mut last = Default::default();
    let mut diverged = None;
    for step in 0..train.steps {
        let data = generate_batch(task, train.batch_size, &mut stream)?;
        let (stats, mut grads) = match model.loss_and_grad(&data) {
            Ok(r) => r,
            Err(MqarError::NonFinite { diagnostics, .. }) => {
                diverged = Some(diagnose(step, &diagnostics, &norms));
                break;
            }
            Err(e) => return Err(e),
        };
        if !grads.is_finite() {
            diverged = Some(diagnose(step, &format!("non-finite gradient, lambda {:?}", stats.lambda), &norms));
            break;
        }
        let rate = scheduled_lr(lr, step, train.steps, train.warmup_fraction);
        norms.push(opt.step(&mut model.params, &mut grads, rate));
        last = stats;
    }
    let steps_run = norms.len();
    let (acc, _) = if diverged.is_some() {
        (0.0, f64::NAN)
    } else {
        accuracy(&model, &evaluation_set(task, train.eval_size)?, 64)?
    };
    Ok((
        RunResult {
            lr,
            seed: train.seed,
            accuracy: acc,
            final_loss: last.loss,
            steps_run,
            diverged,
            spikes: gradient_spikes(&norms, train.spike_factor),
            grad_norms: norms,
            lambda: last.lambda,
        },
        model,
    ))
}

fn diagnose(step: usize, what: &str, norms: &[f64]) -> String {
    let tail = &norms[norms.len().saturating_sub(5)..];
    format!("step {step}: {what}; last gradient norms {tail:?}")
}

/// Runs every learning rate in the grid and keeps the best held-out accuracy.
pub fn train_eval(model_cfg: &ModelConfig, task: &MqarConfig, train: &TrainConfig) -> Result<TrainReport> {
    let mut runs = Vec::with_capacity(train.learning_rates.len());
    for lr in &train.learning_rates {
        runs.push(train_run(model_cfg, task, train, *lr)?.0);
    }
    let best = runs
        .iter()
        .fold(None::<&RunResult>, |b, r| match b {
            Some(b) if b.accuracy >= r.accuracy => Some(b),
            _ => Some(r),
        })
        .expect("non-empty grid");
    Ok(TrainReport {
        mixer: model_cfg.mixer.kind.to_string(),
        best_lr: best.lr,
        best_accuracy: best.accuracy,
        runs,
    })
}
