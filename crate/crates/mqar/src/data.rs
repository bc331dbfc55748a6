//! Multi-query associative recall sequences.
//!
//! A sequence lists `n_kv` key-value pairs, then asks for the value of each key
//! at random positions in the tail. Token 0 is padding; keys and values come
//! from disjoint halves of the remaining vocabulary.

use gka::numerics::SeededRng;
use serde::{Deserialize, Serialize};

use crate::error::{MqarError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MqarConfig {
    pub vocab: usize,
    pub num_kv: usize,
    pub seq_len: usize,
    /// Queries per sequence; defaults to `num_kv` (every key asked once).
    pub num_queries: Option<usize>,
    pub seed: u64,
}

impl Default for MqarConfig {
    fn default() -> Self {
        MqarConfig::new(128, 4, 64, 0)
    }
}

impl MqarConfig {
    pub fn new(vocab: usize, num_kv: usize, seq_len: usize, seed: u64) -> Self {
        MqarConfig {
            vocab,
            num_kv,
            seq_len,
            num_queries: None,
            seed,
        }
    }

    pub fn queries(&self) -> usize {
        self.num_queries.unwrap_or(self.num_kv)
    }

    /// Token range `[lo, hi)` for keys.
    pub fn key_range(&self) -> (usize, usize) {
        let half = (self.vocab - 1) / 2;
        (1, 1 + half)
    }

    /// Token range `[lo, hi)` for values.
    pub fn value_range(&self) -> (usize, usize) {
        let (_, k_hi) = self.key_range();
        (k_hi, self.vocab)
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab < 3 {
            return Err(MqarError::Infeasible(format!("vocab {} leaves no key or value tokens", self.vocab)));
        }
        let (klo, khi) = self.key_range();
        if self.num_kv == 0 || self.num_kv > khi - klo {
            return Err(MqarError::Infeasible(format!(
                "{} pairs need distinct keys but only {} key tokens exist",
                self.num_kv,
                khi - klo
            )));
        }
        if self.queries() > self.num_kv {
            return Err(MqarError::Infeasible(format!("{} queries for {} keys", self.queries(), self.num_kv)));
        }
        if self.seq_len < 2 * self.num_kv + self.queries() {
            return Err(MqarError::Infeasible(format!(
                "length {} cannot hold {} pairs and {} queries",
                self.seq_len,
                self.num_kv,
                self.queries()
            )));
        }
        Ok(())
    }
}

/// A batch of sequences in `(batch, time)` row-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct MqarBatch {
    pub batch: usize,
    pub seq_len: usize,
    pub tokens: Vec<usize>,
    /// Expected value token; meaningful only where `query_mask` is set.
    pub targets: Vec<usize>,
    pub query_mask: Vec<bool>,
}

impl MqarBatch {
    pub fn num_queries(&self) -> usize {
        self.query_mask.iter().filter(|m| **m).count()
    }

    /// Flat indices of query positions.
    pub fn query_positions(&self) -> Vec<usize> {
        (0..self.query_mask.len()).filter(|i| self.query_mask[*i]).collect()
    }
}

/// One sequence: `(tokens, targets, query_mask)`.
pub fn generate_mqar(cfg: &MqarConfig, rng: &mut SeededRng) -> Result<(Vec<usize>, Vec<usize>, Vec<bool>)> {
    cfg.validate()?;
    let t = cfg.seq_len;
    let (klo, khi) = cfg.key_range();
    let (vlo, vhi) = cfg.value_range();
    let mut keys: Vec<usize> = (klo..khi).collect();
    rng.shuffle(&mut keys);
    keys.truncate(cfg.num_kv);
    let values: Vec<usize> = (0..cfg.num_kv).map(|_| vlo + rng.below(vhi - vlo)).collect();

    let mut tokens = vec![0; t];
    let mut targets = vec![0; t];
    let mut mask = vec![false; t];
    for (i, (k, v)) in keys.iter().zip(&values).enumerate() {
        tokens[2 * i] = *k;
        tokens[2 * i + 1] = *v;
    }
    let tail = 2 * cfg.num_kv;
    let mut slots: Vec<usize> = (tail..t).collect();
    rng.shuffle(&mut slots);
    let mut slots = slots[..cfg.queries()].to_vec();
    slots.sort_unstable();
    let mut asked: Vec<usize> = (0..cfg.num_kv).collect();
    rng.shuffle(&mut asked);
    for (pos, pair) in slots.into_iter().zip(asked) {
        tokens[pos] = keys[pair];
        targets[pos] = values[pair];
        mask[pos] = true;
    }
    Ok((tokens, targets, mask))
}

/// `n` sequences drawn from consecutive forks of `rng`.
pub fn generate_batch(cfg: &MqarConfig, n: usize, rng: &mut SeededRng) -> Result<MqarBatch> {
    let mut out = MqarBatch {
        batch: n,
        seq_len: cfg.seq_len,
        tokens: Vec::with_capacity(n * cfg.seq_len),
        targets: Vec::with_capacity(n * cfg.seq_len),
        query_mask: Vec::with_capacity(n * cfg.seq_len),
    };
    for _ in 0..n {
        let (tk, tg, m) = generate_mqar(cfg, rng)?;
        out.tokens.extend(tk);
        out.targets.extend(tg);
        out.query_mask.extend(m);
    }
    Ok(out)
}

/// The held-out set: fixed by the task seed alone.
pub fn evaluation_set(cfg: &MqarConfig, n: usize) -> Result<MqarBatch> {
    generate_batch(cfg, n, &mut SeededRng::new(cfg.seed).fork("eval"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_instance() {
        let cfg = MqarConfig::new(8, 1, 4, 0);
        let (tok, tgt, mask) = generate_mqar(&cfg, &mut SeededRng::new(5)).unwrap();
        let (klo, khi) = cfg.key_range();
        let (vlo, vhi) = cfg.value_range();
        assert!((klo..khi).contains(&tok[0]) && (vlo..vhi).contains(&tok[1]));
        assert_eq!(mask.iter().filter(|m| **m).count(), 1);
        let q = mask.iter().position(|m| *m).unwrap();
        assert!(q >= 2);
        assert_eq!(tok[q], tok[0]);
        assert_eq!(tgt[q], tok[1]);
    }

    #[test]
    fn infeasible_configs() {
        assert!(MqarConfig::new(8, 3, 4, 0).validate().is_err());
        assert!(MqarConfig::new(8, 5, 64, 0).validate().is_err());
        assert!(MqarConfig::new(2, 1, 8, 0).validate().is_err());
        let mut c = MqarConfig::new(64, 4, 16, 0);
        c.num_queries = Some(5);
        assert!(c.validate().is_err());
    }

    #[test]
    fn ranges_are_disjoint() {
        let cfg = MqarConfig::new(9, 2, 8, 0);
        assert_eq!(cfg.key_range(), (1, 5));
        assert_eq!(cfg.value_range(), (5, 9));
    }
}
