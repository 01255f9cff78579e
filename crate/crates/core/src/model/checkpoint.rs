//! Binary checkpoint container.
//!
//! Layout: 8-byte magic, u32 version, u64 header length, JSON header, then
//! every tensor as little-endian f64 in header order, then a SHA-256 of all
//! preceding bytes.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use super::{LayerGroup, ModelConfig, ModelParams, ParamInfo};
use crate::numeric::Tensor;

const MAGIC: &[u8; 8] = b"MLMCKPT\0";
const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{path}: {msg}")]
    Corrupt { path: String, msg: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub group: LayerGroup,
    pub layer: usize,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub member: usize,
    pub weight_seed: u64,
    pub data_seed: u64,
    pub tokenizer_hash: String,
    pub config_hash: String,
    pub steps: u64,
    pub tokens_seen: u64,
    /// Mean training loss (nats) of each epoch.
    pub epoch_loss: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub params: ModelParams,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format: String,
    meta: CheckpointMeta,
    config: ModelConfig,
    params: Vec<ParamEntry>,
}

pub fn encode_checkpoint(ck: &Checkpoint) -> Vec<u8> {
    let header = Header {
        format: "mlm-agreement/checkpoint".into(),
        meta: ck.meta.clone(),
        config: ck.params.config.clone(),
        params: ck
            .params
            .info
            .iter()
            .zip(&ck.params.tensors)
            .map(|(i, t)| ParamEntry { name: i.name.clone(), group: i.group, layer: i.layer, shape: t.shape().to_vec() })
            .collect(),
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(20 + json.len() + 8 * ck.params.param_count() + 32);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for t in &ck.params.tensors {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    out
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint, String> {
    if bytes.len() < 20 + 32 || &bytes[..8] != MAGIC {
        return Err("not a checkpoint file".into());
    }
    let (body, digest) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(body).as_slice() != digest {
        return Err("checksum mismatch".into());
    }
    let version = u32::from_le_bytes(body[8..12].try_into().unwrap());
    if version != VERSION {
        return Err(format!("unsupported checkpoint version {version}"));
    }
    let hlen = u64::from_le_bytes(body[12..20].try_into().unwrap()) as usize;
    let json = body.get(20..20 + hlen).ok_or("truncated header")?;
    let header: Header = serde_json::from_slice(json).map_err(|e| format!("bad header: {e}"))?;
    let mut rest = &body[20 + hlen..];
    let mut info = Vec::new();
    let mut tensors = Vec::new();
    for e in header.params {
        let n: usize = e.shape.iter().product();
        if rest.len() < 8 * n {
            return Err(format!("truncated tensor {}", e.name));
        }
        let (raw, tail) = rest.split_at(8 * n);
        rest = tail;
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        tensors.push(Tensor::from_vec(&e.shape, data));
        info.push(ParamInfo { name: e.name, group: e.group, layer: e.layer });
    }
    if !rest.is_empty() {
        return Err("trailing bytes after tensors".into());
    }
    let expected = super::init_params(&header.config).map_err(|e| e.to_string())?;
    if expected.info != info || expected.tensors.iter().zip(&tensors).any(|(a, b)| a.shape() != b.shape()) {
        return Err("tensor layout does not match the model config".into());
    }
    Ok(Checkpoint { meta: header.meta, params: ModelParams { config: header.config, info, tensors } })
}

pub fn write_checkpoint(path: &Path, ck: &Checkpoint) -> Result<(), CheckpointError> {
    crate::fsutil::write_atomic(path, &encode_checkpoint(ck))
        .map_err(|source| CheckpointError::Io { path: path.display().to_string(), source })
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint, CheckpointError> {
    let bytes = std::fs::read(path).map_err(|source| CheckpointError::Io { path: path.display().to_string(), source })?;
    decode_checkpoint(&bytes).map_err(|msg| CheckpointError::Corrupt { path: path.display().to_string(), msg })
}
