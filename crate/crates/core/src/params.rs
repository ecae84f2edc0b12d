//! Named parameter tensors and the on-disk checkpoint format.
//!
//! A checkpoint is a directory with four files:
//!
//! - `manifest.json` — ordered list of `{name, dtype:"f32", shape, offset, length}`
//!   (offset/length in bytes into `weights.bin`; order is the store's sorted
//!   name order),
//! - `weights.bin` — little-endian f32 data concatenated in manifest order,
//! - `config.json` — the architecture descriptor plus the run-config hash,
//! - `state.json` — stage name and step counter for resumable training.
//!
//! Serialization then deserialization is bit-identical.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nets::Arch;
use crate::tensor::Tensor;

/// Ordered map from dotted tensor names to f32 tensors, plus the
/// architecture descriptor the shapes were derived from.
#[derive(Debug, Clone)]
pub struct ParamStore {
    meta: Arch,
    entries: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new(meta: Arch) -> Self {
        ParamStore {
            meta,
            entries: BTreeMap::new(),
        }
    }

    pub fn meta(&self) -> &Arch {
        &self.meta
    }

    pub fn insert(&mut self, name: &str, t: Tensor) -> Result<()> {
        if self.entries.contains_key(name) {
            return Err(Error::InvalidParam(format!("duplicate parameter {name}")));
        }
        self.entries.insert(name.to_string(), t);
        Ok(())
    }

    /// Replace an existing tensor; the shape must not change.
    pub fn set(&mut self, name: &str, t: Tensor) -> Result<()> {
        match self.entries.get_mut(name) {
            None => Err(Error::NameNotFound(name.to_string())),
            Some(slot) => {
                if slot.shape() != t.shape() {
                    return Err(Error::ShapeMismatch(format!(
                        "set {name}: {:?} vs {:?}",
                        slot.shape(),
                        t.shape()
                    )));
                }
                *slot = t;
                Ok(())
            }
        }
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.entries
            .get(name)
            .ok_or_else(|| Error::NameNotFound(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.entries
            .get_mut(name)
            .ok_or_else(|| Error::NameNotFound(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor> {
        self.entries.remove(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(|s| s.as_str())
    }

    pub fn names_with_prefix(&self, prefix: &str) -> Vec<String> {
        self.entries
            .keys()
            .filter(|k| k.starts_with(prefix))
            .cloned()
            .collect()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total scalar parameter count, optionally restricted to a name prefix.
    pub fn param_count(&self, prefix: &str) -> usize {
        self.entries
            .iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .map(|(_, t)| t.numel())
            .sum()
    }

    /// SHA-256 over names, shapes and raw f32 bytes of entries under a
    /// prefix. Used for frozen-weight and no-mutation invariants.
    pub fn content_hash(&self, prefix: &str) -> String {
        let mut h = Sha256::new();
        for (name, t) in &self.entries {
            if !name.starts_with(prefix) {
                continue;
            }
            h.update(name.as_bytes());
            h.update([0u8]);
            for &d in t.shape() {
                h.update((d as u64).to_le_bytes());
            }
            for &v in t.data() {
                h.update(v.to_le_bytes());
            }
        }
        hex(&h.finalize())
    }
}

pub fn hex(bytes: &[u8]) -> String {
    let mut s = String::with_capacity(bytes.len() * 2);
    for b in bytes {
        s.push_str(&format!("{b:02x}"));
    }
    s
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    dtype: String,
    shape: Vec<usize>,
    offset: usize,
    length: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize, Default, PartialEq)]
pub struct CheckpointState {
    pub stage: String,
    pub step: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CheckpointConfig {
    arch: Arch,
    config_hash: String,
}

/// Write a checkpoint atomically (write to a temp dir, then rename).
pub fn save_checkpoint(
    dir: &Path,
    store: &ParamStore,
    state: &CheckpointState,
    config_hash: &str,
) -> Result<()> {
    let parent = dir.parent().unwrap_or_else(|| Path::new("."));
    fs::create_dir_all(parent)?;
    let tmp = parent.join(format!(
        ".tmp-ckpt-{}-{}",
        std::process::id(),
        state.step
    ));
    if tmp.exists() {
        fs::remove_dir_all(&tmp)?;
    }
    fs::create_dir_all(&tmp)?;

    let mut manifest = Vec::with_capacity(store.len());
    let mut blob: Vec<u8> = Vec::new();
    for (name, t) in store.iter() {
        let offset = blob.len();
        for &v in t.data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
        manifest.push(ManifestEntry {
            name: name.to_string(),
            dtype: "f32".to_string(),
            shape: t.shape().to_vec(),
            offset,
            length: blob.len() - offset,
        });
    }
    fs::write(tmp.join("manifest.json"), serde_json::to_vec_pretty(&manifest)?)?;
    fs::write(tmp.join("weights.bin"), &blob)?;
    let cfg = CheckpointConfig {
        arch: store.meta().clone(),
        config_hash: config_hash.to_string(),
    };
    fs::write(tmp.join("config.json"), serde_json::to_vec_pretty(&cfg)?)?;
    fs::write(tmp.join("state.json"), serde_json::to_vec_pretty(state)?)?;

    if dir.exists() {
        fs::remove_dir_all(dir)?;
    }
    fs::rename(&tmp, dir)?;
    Ok(())
}

/// Load a checkpoint directory; returns the store, its training state and
/// the config hash it was written under.
pub fn load_checkpoint(dir: &Path) -> Result<(ParamStore, CheckpointState, String)> {
    let read = |f: &str| -> Result<Vec<u8>> {
        fs::read(dir.join(f)).map_err(|e| {
            Error::Checkpoint(format!("{}: {e}", dir.join(f).display()))
        })
    };
    let manifest: Vec<ManifestEntry> = serde_json::from_slice(&read("manifest.json")?)?;
    let blob = read("weights.bin")?;
    let cfg: CheckpointConfig = serde_json::from_slice(&read("config.json")?)?;
    let state: CheckpointState = serde_json::from_slice(&read("state.json")?)?;

    let mut store = ParamStore::new(cfg.arch);
    for entry in &manifest {
        if entry.dtype != "f32" {
            return Err(Error::Checkpoint(format!(
                "{}: unsupported dtype {}",
                entry.name, entry.dtype
            )));
        }
        let numel: usize = entry.shape.iter().product();
        if entry.length != numel * 4 {
            return Err(Error::Checkpoint(format!(
                "{}: length {} does not match shape {:?}",
                entry.name, entry.length, entry.shape
            )));
        }
        let end = entry.offset + entry.length;
        if end > blob.len() {
            return Err(Error::Checkpoint(format!(
                "{}: range {}..{} exceeds weights.bin ({} bytes)",
                entry.name,
                entry.offset,
                end,
                blob.len()
            )));
        }
        let data: Vec<f32> = blob[entry.offset..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        store.insert(&entry.name, Tensor::from_vec(&entry.shape, data)?)?;
    }
    Ok((store, state, cfg.config_hash))
}
