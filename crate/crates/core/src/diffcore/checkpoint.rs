//! Directory checkpoints: `manifest.json` plus one little-endian `f32` file per tensor.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::optim::AdamWConfig;
use super::param::ParamStore;
use super::{DiffError, Tensor};

pub const MANIFEST_FILE: &str = "manifest.json";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub trainable: bool,
    pub file: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format_version: u32,
    pub seed: u64,
    pub optimizer: AdamWConfig,
    pub tensors: Vec<TensorEntry>,
}

fn tensor_bytes(t: &Tensor) -> Vec<u8> {
    t.data().iter().flat_map(|v| v.to_le_bytes()).collect()
}

fn file_name(name: &str) -> String {
    let safe: String = name
        .chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '.' || c == '_' || c == '-' {
                c
            } else {
                '_'
            }
        })
        .collect();
    format!("tensors/{safe}.f32")
}

pub fn save_checkpoint(
    dir: &Path,
    store: &ParamStore,
    seed: u64,
    optimizer: AdamWConfig,
) -> Result<CheckpointManifest, DiffError> {
    fs::create_dir_all(dir.join("tensors"))?;
    let mut tensors = Vec::with_capacity(store.len());
    for (_, p) in store.iter() {
        let bytes = tensor_bytes(&p.tensor);
        let file = file_name(&p.name);
        fs::write(dir.join(&file), &bytes)?;
        tensors.push(TensorEntry {
            name: p.name.clone(),
            shape: p.tensor.shape().to_vec(),
            dtype: "f32".into(),
            trainable: p.trainable,
            file,
            sha256: hex::encode(Sha256::digest(&bytes)),
        });
    }
    let manifest = CheckpointManifest {
        format_version: FORMAT_VERSION,
        seed,
        optimizer,
        tensors,
    };
    fs::write(dir.join(MANIFEST_FILE), serde_json::to_vec_pretty(&manifest)?)?;
    Ok(manifest)
}

pub fn load_checkpoint(dir: &Path) -> Result<(ParamStore, CheckpointManifest), DiffError> {
    let raw = fs::read(dir.join(MANIFEST_FILE))?;
    let manifest: CheckpointManifest = serde_json::from_slice(&raw)?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(DiffError::Integrity {
            tensor: MANIFEST_FILE.into(),
            reason: format!("unsupported format version {}", manifest.format_version),
        });
    }
    let mut store = ParamStore::new();
    for e in &manifest.tensors {
        let integrity = |reason: String| DiffError::Integrity {
            tensor: e.name.clone(),
            reason,
        };
        if e.dtype != "f32" {
            return Err(integrity(format!("unsupported dtype {}", e.dtype)));
        }
        let bytes = fs::read(dir.join(&e.file)).map_err(|err| integrity(err.to_string()))?;
        let n: usize = e.shape.iter().product();
        if bytes.len() != n * 4 {
            return Err(integrity(format!("expected {} bytes, found {}", n * 4, bytes.len())));
        }
        if hex::encode(Sha256::digest(&bytes)) != e.sha256 {
            return Err(integrity("checksum mismatch".into()));
        }
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let t = Tensor::new(e.shape.clone(), data)?;
        store
            .add(e.name.clone(), t, e.trainable)
            .map_err(|err| integrity(err.to_string()))?;
    }
    Ok((store, manifest))
}
