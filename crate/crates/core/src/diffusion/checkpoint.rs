//! Checkpoint format: a JSON manifest (config hash, step, phase, RNG state,
//! named-array index) plus one flat little-endian f32 binary per named
//! array. Parameter values and both Adam moments are stored, so training
//! resumes bit-identically.

use super::train::ModelState;
use super::unet::FicgenModel;
use super::{make_schedule, ModelConfig, Phase};
use crate::error::{FicgenError, Result};
use crate::nn::ParamStore;
use crate::num::Real;
use ndarray::{ArrayD, IxDyn};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::Path;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ArrayEntry {
    name: String,
    shape: Vec<usize>,
    file: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CheckpointManifest {
    version: u32,
    step: u64,
    phase: Phase,
    config_hash: String,
    model: ModelConfig,
    store_seed: u64,
    rng: ChaCha8Rng,
    arrays: Vec<ArrayEntry>,
}

fn write_array<F: Real>(dir: &Path, rel: &str, arr: &ArrayD<F>) -> Result<()> {
    let mut bytes = Vec::with_capacity(arr.len() * 4);
    for v in arr.iter() {
        bytes.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
    }
    fs::write(dir.join(rel), bytes)?;
    Ok(())
}

fn read_array<F: Real>(dir: &Path, entry: &ArrayEntry) -> Result<ArrayD<F>> {
    let bytes = fs::read(dir.join(&entry.file))?;
    let expected: usize = entry.shape.iter().product();
    if bytes.len() != expected * 4 {
        return Err(FicgenError::Checkpoint(format!(
            "array {} has {} bytes, expected {}",
            entry.name,
            bytes.len(),
            expected * 4
        )));
    }
    let mut out = ArrayD::<F>::zeros(IxDyn(&entry.shape));
    for (slot, chunk) in out.iter_mut().zip(bytes.chunks_exact(4)) {
        *slot = F::of(f32::from_le_bytes(chunk.try_into().unwrap()) as f64);
    }
    Ok(out)
}

/// Persist the full training state, including the training-loop RNG.
pub fn save_checkpoint<F: Real>(
    state: &ModelState<F>,
    rng: &ChaCha8Rng,
    config_hash: &str,
    dir: &Path,
) -> Result<()> {
    fs::create_dir_all(dir.join("arrays"))?;
    let mut arrays = Vec::new();
    for (name, p) in state.params.iter() {
        for (role, arr) in [("value", &p.value), ("adam_m", &p.m), ("adam_v", &p.v)] {
            let rel = format!("arrays/{name}.{role}.bin");
            write_array(dir, &rel, arr)?;
            arrays.push(ArrayEntry {
                name: format!("{role}/{name}"),
                shape: arr.shape().to_vec(),
                file: rel,
            });
        }
    }
    let manifest = CheckpointManifest {
        version: 1,
        step: state.step,
        phase: state.phase,
        config_hash: config_hash.to_string(),
        model: state.config().clone(),
        store_seed: state.params.seed,
        rng: rng.clone(),
        arrays,
    };
    fs::write(
        dir.join("manifest.json"),
        serde_json::to_string_pretty(&manifest)?,
    )?;
    Ok(())
}

/// Load a checkpoint; returns the state, the restored RNG, and the config
/// hash recorded at save time.
pub fn load_checkpoint<F: Real>(dir: &Path) -> Result<(ModelState<F>, ChaCha8Rng, String)> {
    let manifest: CheckpointManifest = serde_json::from_str(
        &fs::read_to_string(dir.join("manifest.json"))
            .map_err(|e| FicgenError::Checkpoint(format!("missing manifest in {dir:?}: {e}")))?,
    )?;
    let model = FicgenModel::new(manifest.model.clone());
    let mut params = ParamStore::<F>::new(manifest.store_seed);
    model.register(&mut params);
    for entry in &manifest.arrays {
        let (role, name) = entry
            .name
            .split_once('/')
            .ok_or_else(|| FicgenError::Checkpoint(format!("bad array key {}", entry.name)))?;
        if !params.contains(name) {
            return Err(FicgenError::Checkpoint(format!(
                "checkpoint array {name} not in the model"
            )));
        }
        let arr = read_array::<F>(dir, entry)?;
        let p = params.get_mut(name);
        let target = match role {
            "value" => &mut p.value,
            "adam_m" => &mut p.m,
            "adam_v" => &mut p.v,
            other => {
                return Err(FicgenError::Checkpoint(format!("unknown array role {other}")))
            }
        };
        if target.shape() != arr.shape() {
            return Err(FicgenError::Checkpoint(format!(
                "shape mismatch for {name}: {:?} vs {:?}",
                target.shape(),
                arr.shape()
            )));
        }
        *target = arr;
    }
    let sched = make_schedule(manifest.model.t_max)?;
    Ok((
        ModelState {
            model,
            params,
            sched,
            step: manifest.step,
            phase: manifest.phase,
        },
        manifest.rng,
        manifest.config_hash,
    ))
}
