//! Checkpoint directories: `manifest.json` plus `weights.bin`.
//!
//! `weights.bin` holds every tensor as little-endian `f32`, concatenated in
//! manifest order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autograd::ParamStore;
use crate::error::{Error, Result};
use crate::rng::RngCursor;
use crate::tensor::Mat;

use super::{DenoiserConfig, Denoiser};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainingStage {
    Untrained,
    Teacher,
    Init,
    Jdmd,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorRecord {
    pub name: String,
    pub shape: [usize; 2],
    pub dtype: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub config: DenoiserConfig,
    pub stage: TrainingStage,
    /// Free-form role label, e.g. which teacher this is.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub role: Option<String>,
    pub tensors: Vec<TensorRecord>,
    /// Position of the training noise stream when the checkpoint was taken.
    pub rng: RngCursor,
    #[serde(default)]
    pub iterations: u64,
}

/// Write `model` to `dir`. Parameters are narrowed to `f32`.
pub fn save_checkpoint(
    model: &Denoiser,
    dir: &Path,
    stage: TrainingStage,
    role: Option<&str>,
    rng: RngCursor,
    iterations: u64,
) -> Result<()> {
    fs::create_dir_all(dir).map_err(Error::io(dir))?;
    let tensors = model
        .params
        .iter()
        .map(|(name, m)| TensorRecord { name: name.to_string(), shape: [m.rows(), m.cols()], dtype: "f32".into() })
        .collect();
    let manifest =
        CheckpointManifest { config: model.config.clone(), stage, role: role.map(str::to_string), tensors, rng, iterations };
    let mut bytes = Vec::with_capacity(model.params.num_scalars() * 4);
    for (_, m) in model.params.iter() {
        for &v in m.data() {
            bytes.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    let wpath = dir.join("weights.bin");
    fs::write(&wpath, bytes).map_err(Error::io(&wpath))?;
    let mpath = dir.join("manifest.json");
    let json = serde_json::to_vec_pretty(&manifest).map_err(Error::json(&mpath))?;
    fs::write(&mpath, json).map_err(Error::io(&mpath))
}

pub fn load_checkpoint(dir: &Path) -> Result<(Denoiser, CheckpointManifest)> {
    let mpath = dir.join("manifest.json");
    let text = fs::read(&mpath).map_err(Error::io(&mpath))?;
    let manifest: CheckpointManifest = serde_json::from_slice(&text).map_err(Error::json(&mpath))?;
    let wpath = dir.join("weights.bin");
    let bytes = fs::read(&wpath).map_err(Error::io(&wpath))?;
    let total: usize = manifest.tensors.iter().map(|t| t.shape[0] * t.shape[1]).sum();
    if bytes.len() != total * 4 {
        return Err(Error::Format { path: wpath, reason: format!("expected {} bytes, found {}", total * 4, bytes.len()) });
    }
    let mut store = ParamStore::new();
    let mut floats = bytes.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64);
    for t in &manifest.tensors {
        if t.dtype != "f32" {
            return Err(Error::Format { path: mpath, reason: format!("unsupported dtype {}", t.dtype) });
        }
        let data: Vec<f64> = floats.by_ref().take(t.shape[0] * t.shape[1]).collect();
        store.add(t.name.clone(), Mat::from_vec(t.shape[0], t.shape[1], data));
    }
    let model = Denoiser::from_params(manifest.config.clone(), store)
        .map_err(|e| Error::Format { path: dir.into(), reason: e.to_string() })?;
    Ok((model, manifest))
}
