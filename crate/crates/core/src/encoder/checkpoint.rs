//! Checkpoint serialization: a JSON manifest next to a raw little-endian f32
//! blob, so saved weights round-trip bit-exactly and stay inspectable.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use indexmap::IndexMap;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::Tensor;
use crate::optim::OptimizerState;

use super::config::EncoderConfig;
use super::model::EncoderModel;

/// One named span inside a weight blob. `offset` and `len` count f32
/// elements, not bytes.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct BlobEntry {
    name: String,
    shape: Vec<usize>,
    dtype: String,
    offset: usize,
    len: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct ModelManifest {
    config: EncoderConfig,
    params: Vec<BlobEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct OptimizerManifest {
    step: u64,
    entries: Vec<BlobEntry>,
}

fn write_blob(path: &Path, chunks: &[&[f32]]) -> Result<()> {
    let file = File::create(path)?;
    let mut w = BufWriter::new(file);
    for chunk in chunks {
        let mut bytes = Vec::with_capacity(chunk.len() * 4);
        for v in *chunk {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&bytes)?;
    }
    w.flush()?;
    Ok(())
}

fn read_blob(path: &Path, expected_len: usize) -> Result<Vec<f32>> {
    let file = File::open(path)?;
    let mut bytes = Vec::new();
    BufReader::new(file).read_to_end(&mut bytes)?;
    if bytes.len() != expected_len * 4 {
        return Err(Error::data(format!(
            "weight blob {} holds {} bytes but the manifest describes {} elements",
            path.display(),
            bytes.len(),
            expected_len
        )));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect())
}

fn check_entry(entry: &BlobEntry, blob_len: usize) -> Result<()> {
    if entry.dtype != "f32" {
        return Err(Error::data(format!(
            "entry `{}` has dtype `{}` but only f32 checkpoints are supported",
            entry.name, entry.dtype
        )));
    }
    let numel: usize = entry.shape.iter().product();
    if numel != entry.len {
        return Err(Error::data(format!(
            "entry `{}` declares shape {:?} ({} elements) but len {}",
            entry.name, entry.shape, numel, entry.len
        )));
    }
    if entry.offset + entry.len > blob_len {
        return Err(Error::data(format!(
            "entry `{}` spans [{}, {}) beyond the blob of {} elements",
            entry.name,
            entry.offset,
            entry.offset + entry.len,
            blob_len
        )));
    }
    Ok(())
}

/// Saves a model into `dir` as `model.json` + `model.bin`.
pub fn save_model(dir: &Path, model: &EncoderModel<f32>) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut entries = Vec::with_capacity(model.params.len());
    let mut chunks: Vec<&[f32]> = Vec::with_capacity(model.params.len());
    let mut offset = 0;
    for (name, t) in &model.params {
        entries.push(BlobEntry {
            name: name.clone(),
            shape: t.shape().to_vec(),
            dtype: "f32".into(),
            offset,
            len: t.numel(),
        });
        chunks.push(t.data());
        offset += t.numel();
    }
    let manifest = ModelManifest { config: model.config.clone(), params: entries };
    let json = serde_json::to_string_pretty(&manifest).map_err(Error::from)?;
    fs::write(dir.join("model.json"), json)?;
    write_blob(&dir.join("model.bin"), &chunks)
}

/// Loads a model saved by [`save_model`], bit-exactly.
pub fn load_model(dir: &Path) -> Result<EncoderModel<f32>> {
    let json = fs::read_to_string(dir.join("model.json"))?;
    let manifest: ModelManifest = serde_json::from_str(&json)?;
    manifest.config.validate()?;
    let total: usize = manifest.params.iter().map(|e| e.len).sum();
    let blob = read_blob(&dir.join("model.bin"), total)?;
    let mut params = IndexMap::with_capacity(manifest.params.len());
    for entry in &manifest.params {
        check_entry(entry, blob.len())?;
        let data = blob[entry.offset..entry.offset + entry.len].to_vec();
        let tensor = Tensor::from_vec(&entry.shape, data)?;
        if params.insert(entry.name.clone(), tensor).is_some() {
            return Err(Error::data(format!("duplicate parameter `{}` in manifest", entry.name)));
        }
    }
    Ok(EncoderModel { config: manifest.config, params })
}

/// Saves optimizer moments and step count into `dir` as `optim.json` +
/// `optim.bin`. Moment vectors are stored under `m.<param>` / `v.<param>`.
pub fn save_optimizer(dir: &Path, state: &OptimizerState<f32>) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut entries = Vec::new();
    let mut chunks: Vec<&[f32]> = Vec::new();
    let mut offset = 0;
    for (prefix, map) in [("m", &state.m), ("v", &state.v)] {
        for (name, vec) in map {
            entries.push(BlobEntry {
                name: format!("{prefix}.{name}"),
                shape: vec![vec.len()],
                dtype: "f32".into(),
                offset,
                len: vec.len(),
            });
            chunks.push(vec.as_slice());
            offset += vec.len();
        }
    }
    let manifest = OptimizerManifest { step: state.step, entries };
    let json = serde_json::to_string_pretty(&manifest).map_err(Error::from)?;
    fs::write(dir.join("optim.json"), json)?;
    write_blob(&dir.join("optim.bin"), &chunks)
}

/// Loads optimizer state saved by [`save_optimizer`].
pub fn load_optimizer(dir: &Path) -> Result<OptimizerState<f32>> {
    let json = fs::read_to_string(dir.join("optim.json"))?;
    let manifest: OptimizerManifest = serde_json::from_str(&json)?;
    let total: usize = manifest.entries.iter().map(|e| e.len).sum();
    let blob = read_blob(&dir.join("optim.bin"), total)?;
    let mut state = OptimizerState { m: IndexMap::new(), v: IndexMap::new(), step: manifest.step };
    for entry in &manifest.entries {
        check_entry(entry, blob.len())?;
        let data = blob[entry.offset..entry.offset + entry.len].to_vec();
        let (map, param) = match entry.name.split_once('.') {
            Some(("m", rest)) => (&mut state.m, rest),
            Some(("v", rest)) => (&mut state.v, rest),
            _ => {
                return Err(Error::data(format!(
                    "optimizer entry `{}` is neither `m.<param>` nor `v.<param>`",
                    entry.name
                )))
            }
        };
        if map.insert(param.to_string(), data).is_some() {
            return Err(Error::data(format!("duplicate optimizer entry `{}`", entry.name)));
        }
    }
    Ok(state)
}

/// Saves any serializable run state as pretty JSON at `path`.
pub fn save_run_state<T: Serialize>(path: &Path, state: &T) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let json = serde_json::to_string_pretty(state).map_err(Error::from)?;
    fs::write(path, json)?;
    Ok(())
}

/// Loads run state saved by [`save_run_state`].
pub fn load_run_state<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let json = fs::read_to_string(path)?;
    Ok(serde_json::from_str(&json)?)
}
