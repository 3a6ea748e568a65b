//! Checkpoint archive.
//!
//! Layout: magic `HSVA`, u32 LE manifest length, UTF-8 JSON manifest, then
//! a payload of concatenated 64-bit tensor containers. The manifest holds
//! the run configuration, the training state and one entry per tensor
//! (`name → offset, length` into the payload). Tensors are every parameter
//! and buffer under `param/<name>` and the Adam moments under
//! `adam_m/<name>` and `adam_v/<name>`.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::train::{TrainState, Trainer};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::tensor::{read_container_bytes, write_container_bytes, Precision, Tensor};

const MAGIC: &[u8; 4] = b"HSVA";
const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Entry {
    name: String,
    offset: usize,
    length: usize,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    config: RunConfig,
    state: TrainState,
    adam_steps: u64,
    entries: Vec<Entry>,
}

pub fn save_checkpoint(trainer: &Trainer, path: &Path) -> Result<()> {
    let mut payload = Vec::new();
    let mut entries = Vec::new();
    let mut push = |name: String, t: &Tensor| {
        let bytes = write_container_bytes(t, Precision::F64);
        entries.push(Entry { name, offset: payload.len(), length: bytes.len() });
        payload.extend_from_slice(&bytes);
    };
    for p in trainer.model.store.all() {
        push(format!("param/{}", p.name()), &p.value());
    }
    let opt = &trainer.optimizer;
    for (k, p) in opt.params().iter().enumerate() {
        push(format!("adam_m/{}", p.name()), &Tensor::new(opt.m[k].clone(), p.shape())?);
        push(format!("adam_v/{}", p.name()), &Tensor::new(opt.v[k].clone(), p.shape())?);
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        config: trainer.cfg.clone(),
        state: trainer.state.clone(),
        adam_steps: opt.t,
        entries,
    };
    let json = serde_json::to_vec(&manifest).expect("manifest serializes");
    let mut out = Vec::with_capacity(8 + json.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&payload);
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Trainer> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 8 || &bytes[..4] != MAGIC {
        return Err(Error::format(path, "not a checkpoint archive (bad magic)"));
    }
    let len = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let json = bytes.get(8..8 + len).ok_or_else(|| Error::format(path, "truncated manifest"))?;
    let manifest: Manifest = serde_json::from_slice(json).map_err(|e| Error::format(path, e.to_string()))?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::format(path, format!("unsupported archive version {}", manifest.format_version)));
    }
    let payload = &bytes[8 + len..];
    let mut tensors: HashMap<String, Tensor> = HashMap::new();
    for e in &manifest.entries {
        let chunk = payload
            .get(e.offset..e.offset + e.length)
            .ok_or_else(|| Error::format(path, format!("entry {} out of bounds", e.name)))?;
        let (t, used) = read_container_bytes(chunk).map_err(|r| Error::format(path, format!("{}: {r}", e.name)))?;
        if used != e.length {
            return Err(Error::format(path, format!("entry {} has trailing bytes", e.name)));
        }
        tensors.insert(e.name.clone(), t);
    }
    let mut trainer = Trainer::new(&manifest.config)?;
    let mut take = |key: String, shape: &[usize]| -> Result<Vec<f64>> {
        let t = tensors.remove(&key).ok_or_else(|| Error::format(path, format!("missing tensor {key}")))?;
        if t.shape() != shape {
            return Err(Error::format(path, format!("{key} has shape {:?}, expected {shape:?}", t.shape())));
        }
        Ok(t.to_vec())
    };
    for p in trainer.model.store.all() {
        p.set_data(take(format!("param/{}", p.name()), p.shape())?)?;
    }
    let params = trainer.optimizer.params().to_vec();
    for (k, p) in params.iter().enumerate() {
        trainer.optimizer.m[k] = take(format!("adam_m/{}", p.name()), p.shape())?;
        trainer.optimizer.v[k] = take(format!("adam_v/{}", p.name()), p.shape())?;
    }
    if let Some(extra) = tensors.keys().next() {
        return Err(Error::format(path, format!("unexpected tensor {extra}")));
    }
    trainer.optimizer.t = manifest.adam_steps;
    trainer.state = manifest.state;
    Ok(trainer)
}
