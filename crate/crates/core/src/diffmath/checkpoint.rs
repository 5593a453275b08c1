//! Binary checkpoint container.
//!
//! Layout, all little-endian:
//!
//! ```text
//! magic   "CVCK"            4 bytes
//! version u32               currently 1
//! mlen    u64               manifest length in bytes
//! manifest                  UTF-8 JSON: {config, config_hash, tensors: [{name, shape}]}
//! data    f64 * sum(sizes)  tensors in manifest order, row-major
//! ```
//!
//! `config_hash` is the SHA-256 of the compact JSON encoding of `config`.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::scalar::Scalar;

use super::params::ParamStore;
use super::tensor::Tensor;

const MAGIC: &[u8; 4] = b"CVCK";
const VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("checkpoint i/o on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("not a checkpoint: {0}")]
    Format(String),
    #[error("checkpoint config hash {found} does not match expected {expected}")]
    HashMismatch { expected: String, found: String },
    #[error("checkpoint tensor mismatch: {0}")]
    Mismatch(String),
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    config: serde_json::Value,
    config_hash: String,
    tensors: Vec<TensorEntry>,
}

/// SHA-256 hex digest of the compact JSON form of `config`.
pub fn config_hash(config: &serde_json::Value) -> String {
    let bytes = serde_json::to_vec(config).expect("json value serializes");
    hex::encode(Sha256::digest(&bytes))
}

/// Parameters read back from disk, with the architecture config they were saved under.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config: serde_json::Value,
    pub config_hash: String,
    pub tensors: Vec<(String, Tensor<f64>)>,
}

impl Checkpoint {
    /// Copies every stored tensor into `store`. Names and shapes must match exactly.
    pub fn restore_into<T: Scalar>(&self, store: &mut ParamStore<T>) -> Result<(), CheckpointError> {
        if self.tensors.len() != store.len() {
            return Err(CheckpointError::Mismatch(format!(
                "checkpoint has {} tensors, model expects {}",
                self.tensors.len(),
                store.len()
            )));
        }
        for (name, t) in &self.tensors {
            store
                .assign(name, t.cast())
                .map_err(|e| CheckpointError::Mismatch(format!("{name}: {e}")))?;
        }
        Ok(())
    }
}

pub fn encode_checkpoint<T: Scalar>(config: &serde_json::Value, store: &ParamStore<T>) -> Vec<u8> {
    let manifest = Manifest {
        config: config.clone(),
        config_hash: config_hash(config),
        tensors: store
            .ids()
            .map(|id| TensorEntry {
                name: store.name(id).to_string(),
                shape: store.value(id).shape().to_vec(),
            })
            .collect(),
    };
    let mjson = serde_json::to_vec(&manifest).expect("manifest serializes");
    let mut out = Vec::with_capacity(16 + mjson.len() + 8 * store.entry_count());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(mjson.len() as u64).to_le_bytes());
    out.extend_from_slice(&mjson);
    for id in store.ids() {
        for v in store.value(id).data() {
            out.extend_from_slice(&v.as_f64().to_le_bytes());
        }
    }
    out
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint, CheckpointError> {
    let fmt = |m: &str| CheckpointError::Format(m.to_string());
    if bytes.len() < 16 || &bytes[..4] != MAGIC {
        return Err(fmt("bad magic"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(CheckpointError::Format(format!("unsupported version {version}")));
    }
    let mlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let mend = 16usize.checked_add(mlen).filter(|&e| e <= bytes.len()).ok_or_else(|| fmt("truncated manifest"))?;
    let manifest: Manifest =
        serde_json::from_slice(&bytes[16..mend]).map_err(|e| CheckpointError::Format(format!("manifest: {e}")))?;
    let recomputed = config_hash(&manifest.config);
    if recomputed != manifest.config_hash {
        return Err(CheckpointError::HashMismatch {
            expected: manifest.config_hash,
            found: recomputed,
        });
    }
    let mut pos = mend;
    let mut tensors = Vec::with_capacity(manifest.tensors.len());
    for entry in manifest.tensors {
        let n: usize = entry.shape.iter().product();
        let end = pos + 8 * n;
        if end > bytes.len() {
            return Err(fmt("truncated tensor data"));
        }
        let data: Vec<f64> = bytes[pos..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        pos = end;
        let t = Tensor::new(entry.shape, data).map_err(|e| CheckpointError::Format(e.to_string()))?;
        tensors.push((entry.name, t));
    }
    if pos != bytes.len() {
        return Err(fmt("trailing bytes"));
    }
    Ok(Checkpoint {
        config: manifest.config,
        config_hash: manifest.config_hash,
        tensors,
    })
}

pub fn save_checkpoint<T: Scalar>(
    path: &Path,
    config: &serde_json::Value,
    store: &ParamStore<T>,
) -> Result<(), CheckpointError> {
    let io = |source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    };
    let bytes = encode_checkpoint(config, store);
    let mut f = fs::File::create(path).map_err(io)?;
    f.write_all(&bytes).map_err(io)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, CheckpointError> {
    let bytes = fs::read(path).map_err(|source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    })?;
    decode_checkpoint(&bytes)
}
