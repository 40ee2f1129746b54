//! Checkpoint file: `b"NEE1"`, `u32` header length, JSON header, then the
//! parameter payload as little-endian `f64`s in manifest order.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::numerics::Tensor;

use super::{Model, ModelConfig, ModelError, ParamStore};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"NEE1";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    /// Optimizer steps taken.
    pub step: u64,
    pub seed: u64,
}

#[derive(Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
    /// Byte offset into the payload.
    offset: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    config_hash: String,
    step: u64,
    seed: u64,
    manifest: Vec<ManifestEntry>,
    payload_len: usize,
    payload_sha256: String,
}

fn corrupt(msg: impl Into<String>) -> ModelError {
    ModelError::Checkpoint(msg.into())
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut payload = Vec::new();
        let mut manifest = Vec::new();
        for (name, t) in self.model.params.iter() {
            manifest.push(ManifestEntry { name: name.clone(), shape: t.shape().to_vec(), offset: payload.len() });
            for v in t.data() {
                payload.extend(v.to_le_bytes());
            }
        }
        let header = Header {
            config: self.model.config.clone(),
            config_hash: self.model.config.hash(),
            step: self.step,
            seed: self.seed,
            manifest,
            payload_len: payload.len(),
            payload_sha256: hex::encode(Sha256::digest(&payload)),
        };
        let header = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(8 + header.len() + payload.len());
        out.extend(CHECKPOINT_MAGIC);
        out.extend((header.len() as u32).to_le_bytes());
        out.extend(header);
        out.extend(payload);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, ModelError> {
        if bytes.len() < 8 || &bytes[..4] != CHECKPOINT_MAGIC {
            return Err(corrupt("missing NEE1 magic"));
        }
        let hlen = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        let body = &bytes[8..];
        if body.len() < hlen {
            return Err(corrupt("truncated header"));
        }
        let header: Header =
            serde_json::from_slice(&body[..hlen]).map_err(|e| corrupt(format!("bad header: {e}")))?;
        let payload = &body[hlen..];
        if payload.len() != header.payload_len {
            return Err(corrupt(format!("payload is {} bytes, header says {}", payload.len(), header.payload_len)));
        }
        if hex::encode(Sha256::digest(payload)) != header.payload_sha256 {
            return Err(corrupt("payload checksum mismatch"));
        }
        if header.config.hash() != header.config_hash {
            return Err(ModelError::ConfigMismatch { expected: header.config_hash, found: header.config.hash() });
        }
        let mut tensors = BTreeMap::new();
        for e in header.manifest {
            let n: usize = e.shape.iter().product();
            let end = e.offset + 8 * n;
            if end > payload.len() {
                return Err(corrupt(format!("tensor {} runs past the payload", e.name)));
            }
            let data = payload[e.offset..end].chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
            tensors.insert(e.name, Tensor::new(e.shape, data)?);
        }
        let params = ParamStore::from_map(tensors);
        params.check_against(&header.config)?;
        Ok(Self { model: Model { config: header.config, params }, step: header.step, seed: header.seed })
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<(), ModelError> {
    std::fs::write(path, ckpt.to_bytes())?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, ModelError> {
    Checkpoint::from_bytes(&std::fs::read(path)?)
}

/// Loads and refuses a checkpoint whose configuration differs from
/// `expected`.
pub fn load_checkpoint_expecting(path: &Path, expected: &ModelConfig) -> Result<Checkpoint, ModelError> {
    let c = load_checkpoint(path)?;
    if c.model.config.hash() != expected.hash() {
        return Err(ModelError::ConfigMismatch { expected: expected.hash(), found: c.model.config.hash() });
    }
    Ok(c)
}
