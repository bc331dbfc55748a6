//! Flat little-endian tensor archive plus a JSON manifest.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{MqarError, Result};
use crate::model::{ModelConfig, ToyModel};
use crate::params::{ParamStore, Tensor};

pub const FORMAT: &str = "gka-mqar-checkpoint/1";
pub const ARCHIVE: &str = "params.bin";
pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    /// Byte offset into the archive.
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub seed: u64,
    pub config: ModelConfig,
    pub config_hash: String,
    pub tensors: Vec<TensorEntry>,
}

/// Hex SHA-256 of the config's canonical JSON.
pub fn config_hash(cfg: &ModelConfig) -> Result<String> {
    let json = serde_json::to_vec(&serde_json::to_value(cfg)?)?;
    Ok(Sha256::digest(&json).iter().map(|b| format!("{b:02x}")).collect())
}

pub fn save_checkpoint(dir: &Path, model: &ToyModel, seed: u64) -> Result<Manifest> {
    fs::create_dir_all(dir)?;
    let mut bytes = Vec::with_capacity(model.num_params() * 8);
    let mut tensors = Vec::with_capacity(model.params.tensors.len());
    for t in &model.params.tensors {
        tensors.push(TensorEntry {
            name: t.name.clone(),
            shape: t.shape.clone(),
            dtype: "f64le".into(),
            offset: bytes.len(),
        });
        for x in &t.data {
            bytes.extend_from_slice(&x.to_le_bytes());
        }
    }
    let manifest = Manifest {
        format: FORMAT.into(),
        seed,
        config: model.cfg.clone(),
        config_hash: config_hash(&model.cfg)?,
        tensors,
    };
    fs::write(dir.join(ARCHIVE), bytes)?;
    fs::write(dir.join(MANIFEST), serde_json::to_string_pretty(&manifest)?)?;
    Ok(manifest)
}

pub fn load_checkpoint(dir: &Path) -> Result<(ToyModel, Manifest)> {
    let manifest: Manifest = serde_json::from_slice(&fs::read(dir.join(MANIFEST))?)?;
    let bad = |m: String| Err(MqarError::Checkpoint(m));
    if manifest.format != FORMAT {
        return bad(format!("unsupported format {:?}", manifest.format));
    }
    if config_hash(&manifest.config)? != manifest.config_hash {
        return bad("config hash does not match the stored config".into());
    }
    let bytes = fs::read(dir.join(ARCHIVE))?;
    let mut params = ParamStore::default();
    for e in &manifest.tensors {
        if e.dtype != "f64le" {
            return bad(format!("{}: unsupported dtype {}", e.name, e.dtype));
        }
        let n: usize = e.shape.iter().product();
        let end = e.offset + 8 * n;
        if end > bytes.len() {
            return bad(format!("{}: archive truncated", e.name));
        }
        let data = bytes[e.offset..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        params.tensors.push(Tensor {
            name: e.name.clone(),
            shape: e.shape.clone(),
            data,
        });
    }
    let expected = ToyModel::init(&manifest.config, manifest.seed)?;
    let layout = |p: &ParamStore| p.tensors.iter().map(|t| (t.name.clone(), t.shape.clone())).collect::<Vec<_>>();
    if layout(&expected.params) != layout(&params) {
        return bad("tensor layout does not match the config".into());
    }
    Ok((
        ToyModel {
            cfg: manifest.config.clone(),
            params,
        },
        manifest,
    ))
}
