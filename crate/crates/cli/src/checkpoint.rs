//! Checkpoint container.
//!
//! ```text
//! magic "STDFNCCK" | u64 LE manifest length | JSON manifest | payload
//! ```
//!
//! The payload is every tensor back to back as little-endian `f64`, in the
//! order the manifest lists them, followed by the optimizer moments if
//! present. The manifest carries the SHA-256 of the payload.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use stdfnc::model::{ModelConfig, ModelParams};
use stdfnc::train::OptimState;
use stdfnc::Tensor;

use crate::error::{CliError, Result};

pub const CHECKPOINT_VERSION: u64 = 1;
const MAGIC: &[u8; 8] = b"STDFNCCK";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub params: ModelParams,
    pub optimizer: Option<OptimState>,
    /// Seed the fold was trained with.
    pub seed: u64,
    pub fold: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    /// Byte offset into the payload.
    offset: u64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct OptimHeader {
    t: u64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    m: Vec<Entry>,
    v: Vec<Entry>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    version: u64,
    config: ModelConfig,
    seed: u64,
    fold: usize,
    tensors: Vec<Entry>,
    optimizer: Option<OptimHeader>,
    payload_bytes: u64,
    sha256: String,
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn push(payload: &mut Vec<u8>, name: &str, shape: &[usize], data: &[f64]) -> Entry {
    let offset = payload.len() as u64;
    payload.extend(data.iter().flat_map(|v| v.to_le_bytes()));
    Entry { name: name.to_string(), shape: shape.to_vec(), offset }
}

pub fn encode_checkpoint(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    let mut payload = Vec::with_capacity(ckpt.params.n_scalars() * 8);
    let tensors = ckpt.params.iter().map(|(name, t)| push(&mut payload, name, t.shape(), t.data())).collect();
    let optimizer = ckpt.optimizer.as_ref().map(|s| {
        let m = s.m.iter().map(|(name, v)| push(&mut payload, name, &[v.len()], v)).collect();
        let v = s.v.iter().map(|(name, v)| push(&mut payload, name, &[v.len()], v)).collect();
        OptimHeader { t: s.t, beta1: s.beta1, beta2: s.beta2, eps: s.eps, m, v }
    });
    let manifest = Manifest {
        version: CHECKPOINT_VERSION,
        config: ckpt.config.clone(),
        seed: ckpt.seed,
        fold: ckpt.fold,
        tensors,
        optimizer,
        payload_bytes: payload.len() as u64,
        sha256: hex(&Sha256::digest(&payload)),
    };
    let json = serde_json::to_vec(&manifest).map_err(|e| CliError::Config(e.to_string()))?;
    let mut out = Vec::with_capacity(16 + json.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&payload);
    Ok(out)
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    fs::write(path, encode_checkpoint(ckpt)?).map_err(|e| CliError::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| CliError::io(path, e))?;
    decode_checkpoint(path, &bytes)
}

/// `path` is only used in error messages.
pub fn decode_checkpoint(path: &Path, bytes: &[u8]) -> Result<Checkpoint> {
    let truncated = |expected: u64| CliError::Truncated { path: path.to_path_buf(), expected, found: bytes.len() as u64 };
    if bytes.len() < 16 {
        return Err(truncated(16));
    }
    if &bytes[..8] != MAGIC {
        return Err(CliError::format(path, "not a checkpoint (bad magic)"));
    }
    let json_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
    let header_end = 16u64.checked_add(json_len).ok_or_else(|| CliError::format(path, "manifest length overflows"))?;
    if (bytes.len() as u64) < header_end {
        return Err(truncated(header_end));
    }
    let json = &bytes[16..header_end as usize];
    let raw: serde_json::Value = serde_json::from_slice(json).map_err(|e| CliError::format(path, format!("manifest: {e}")))?;
    let found = raw.get("version").and_then(|v| v.as_u64()).ok_or_else(|| CliError::format(path, "manifest has no version"))?;
    if found != CHECKPOINT_VERSION {
        return Err(CliError::CheckpointVersion { path: path.to_path_buf(), found, supported: CHECKPOINT_VERSION });
    }
    let manifest: Manifest = serde_json::from_value(raw).map_err(|e| CliError::format(path, format!("manifest: {e}")))?;
    let payload = &bytes[header_end as usize..];
    let expected_len = header_end + manifest.payload_bytes;
    if (bytes.len() as u64) < expected_len {
        return Err(truncated(expected_len));
    }
    if (payload.len() as u64) > manifest.payload_bytes {
        return Err(CliError::format(path, format!("{} trailing bytes after the payload", payload.len() as u64 - manifest.payload_bytes)));
    }
    let digest = hex(&Sha256::digest(payload));
    if digest != manifest.sha256 {
        return Err(CliError::Checksum { path: path.to_path_buf(), expected: manifest.sha256, found: digest });
    }

    let read = |e: &Entry| -> Result<Vec<f64>> {
        let count: usize = e.shape.iter().product();
        let start = e.offset as usize;
        let end = start + count * 8;
        if end > payload.len() {
            return Err(CliError::format(path, format!("tensor `{}` extends past the payload", e.name)));
        }
        Ok(payload[start..end].chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
    };
    let mut tensors = BTreeMap::new();
    for e in &manifest.tensors {
        tensors.insert(e.name.clone(), Tensor::new(e.shape.clone(), read(e)?)?);
    }
    let params = ModelParams::from_tensors(&manifest.config, tensors)?;
    let optimizer = match &manifest.optimizer {
        None => None,
        Some(h) => {
            let mut m = BTreeMap::new();
            let mut v = BTreeMap::new();
            for e in &h.m {
                m.insert(e.name.clone(), read(e)?);
            }
            for e in &h.v {
                v.insert(e.name.clone(), read(e)?);
            }
            Some(OptimState { m, v, t: h.t, beta1: h.beta1, beta2: h.beta2, eps: h.eps })
        }
    };
    Ok(Checkpoint { config: manifest.config, params, optimizer, seed: manifest.seed, fold: manifest.fold })
}
