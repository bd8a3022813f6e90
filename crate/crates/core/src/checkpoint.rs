//! Checkpoints: a JSON manifest describing every parameter (name, shape,
//! dtype, byte offset) plus a raw little-endian blob of the values. Both
//! files are byte-identical across reruns of the same run.

use crate::autodiff::ParamStore;
use crate::tensor::{Precision, Tensor};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("manifest parse: {0}")]
    Json(#[from] serde_json::Error),
    #[error("blob length {got} bytes, manifest expects {expected}")]
    BlobLength { got: usize, expected: usize },
    #[error("unknown dtype {0:?}")]
    Dtype(String),
    #[error("parameter {name}: store has shape {store:?}, checkpoint has {ckpt:?}")]
    ShapeMismatch { name: String, store: Vec<usize>, ckpt: Vec<usize> },
    #[error("parameter count mismatch: store {store}, checkpoint {ckpt}")]
    CountMismatch { store: usize, ckpt: usize },
    #[error("parameter name mismatch at position {index}: store {store:?}, checkpoint {ckpt:?}")]
    NameMismatch { index: usize, store: String, ckpt: String },
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub byte_len: usize,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub dtype: String,
    pub total_bytes: usize,
    pub sha256: String,
    pub params: Vec<ParamEntry>,
}

fn dtype_str(p: Precision) -> &'static str {
    match p {
        Precision::F64 => "f64",
        Precision::F32 => "f32",
    }
}

fn elem_size(p: Precision) -> usize {
    match p {
        Precision::F64 => 8,
        Precision::F32 => 4,
    }
}

fn encode_blob(store: &ParamStore, precision: Precision) -> (Vec<u8>, Vec<ParamEntry>) {
    let mut blob = Vec::new();
    let mut entries = Vec::new();
    for id in store.ids() {
        let p = store.get(id);
        let offset = blob.len();
        match precision {
            Precision::F64 => {
                for &v in &p.value.data {
                    blob.extend_from_slice(&v.to_le_bytes());
                }
            }
            Precision::F32 => {
                for &v in &p.value.data {
                    blob.extend_from_slice(&(v as f32).to_le_bytes());
                }
            }
        }
        entries.push(ParamEntry {
            name: store.name(id).to_string(),
            shape: p.value.shape.clone(),
            offset,
            byte_len: blob.len() - offset,
        });
    }
    (blob, entries)
}

/// Hex sha-256 over the serialized parameter values, in store order.
pub fn param_hash(store: &ParamStore, precision: Precision) -> String {
    let (blob, _) = encode_blob(store, precision);
    hex::encode(Sha256::digest(&blob))
}

pub fn save(store: &ParamStore, precision: Precision, dir: &Path) -> std::io::Result<()> {
    let (blob, params) = encode_blob(store, precision);
    let manifest = Manifest {
        dtype: dtype_str(precision).to_string(),
        total_bytes: blob.len(),
        sha256: hex::encode(Sha256::digest(&blob)),
        params,
    };
    std::fs::write(dir.join("checkpoint.bin"), &blob)?;
    let mut json = serde_json::to_vec_pretty(&manifest).expect("manifest serializes");
    json.push(b'\n');
    std::fs::write(dir.join("checkpoint.json"), json)
}

/// Loads values back into a store that was built with the same config.
/// Names, shapes, and the blob length are all validated before any write.
pub fn load_into(store: &mut ParamStore, dir: &Path) -> Result<(), CheckpointError> {
    let manifest: Manifest =
        serde_json::from_slice(&std::fs::read(dir.join("checkpoint.json"))?)?;
    let blob = std::fs::read(dir.join("checkpoint.bin"))?;
    if blob.len() != manifest.total_bytes {
        return Err(CheckpointError::BlobLength {
            got: blob.len(),
            expected: manifest.total_bytes,
        });
    }
    let precision = match manifest.dtype.as_str() {
        "f64" => Precision::F64,
        "f32" => Precision::F32,
        other => return Err(CheckpointError::Dtype(other.to_string())),
    };
    let es = elem_size(precision);
    let ids: Vec<_> = store.ids().collect();
    if ids.len() != manifest.params.len() {
        return Err(CheckpointError::CountMismatch {
            store: ids.len(),
            ckpt: manifest.params.len(),
        });
    }
    for (i, (&id, entry)) in ids.iter().zip(&manifest.params).enumerate() {
        let name = store.name(id).to_string();
        if name != entry.name {
            return Err(CheckpointError::NameMismatch {
                index: i,
                store: name,
                ckpt: entry.name.clone(),
            });
        }
        let shape = store.get(id).value.shape.clone();
        if shape != entry.shape {
            return Err(CheckpointError::ShapeMismatch {
                name,
                store: shape,
                ckpt: entry.shape.clone(),
            });
        }
        let numel: usize = entry.shape.iter().product();
        if entry.byte_len != numel * es || entry.offset + entry.byte_len > blob.len() {
            return Err(CheckpointError::BlobLength {
                got: blob.len(),
                expected: entry.offset + numel * es,
            });
        }
    }
    for (&id, entry) in ids.iter().zip(&manifest.params) {
        let bytes = &blob[entry.offset..entry.offset + entry.byte_len];
        let mut data = Vec::with_capacity(entry.byte_len / es);
        match precision {
            Precision::F64 => {
                for c in bytes.chunks_exact(8) {
                    data.push(f64::from_le_bytes(c.try_into().unwrap()));
                }
            }
            Precision::F32 => {
                for c in bytes.chunks_exact(4) {
                    data.push(f32::from_le_bytes(c.try_into().unwrap()) as f64);
                }
            }
        }
        store.get_mut(id).value = Tensor::new(entry.shape.clone(), data);
    }
    Ok(())
}
