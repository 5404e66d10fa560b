//! Versioned model checkpoints: a single archive holding every parameter
//! tensor keyed by module path plus the configuration echo.
//!
//! Layout: magic `GDP1`, little-endian u32 format version, little-endian
//! u64 JSON header length, the header (config echo and tensor index), then
//! the raw tensor values as little-endian f64 in index order.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::Config;
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"GDP1";
pub const VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint: bad magic")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u32),
    #[error("checkpoint is truncated")]
    Truncated,
    #[error("corrupt header: {0}")]
    CorruptHeader(String),
    #[error("tensor sizes overflow or disagree with the payload")]
    BadPayloadSize,
    #[error("checkpoint is missing tensor `{name}`")]
    MissingTensor { name: String },
    #[error("checkpoint holds unknown tensor `{name}`")]
    UnknownTensor { name: String },
    #[error("tensor `{name}` has shape {got:?}, expected {expected:?}")]
    ShapeMismatch { name: String, expected: Vec<usize>, got: Vec<usize> },
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: Config,
    tensors: Vec<TensorEntry>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

/// Serialize a parameter store and config echo to checkpoint bytes.
pub fn encode_checkpoint(config: &Config, store: &ParamStore) -> Vec<u8> {
    let header = Header {
        config: config.clone(),
        tensors: store
            .iter()
            .map(|(name, t)| TensorEntry { name: name.to_string(), shape: t.shape().to_vec() })
            .collect(),
    };
    let header_json = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(16 + header_json.len() + store.num_scalars() * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(header_json.len() as u64).to_le_bytes());
    out.extend_from_slice(&header_json);
    for (_, tensor) in store.iter() {
        for v in tensor.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

/// Parse checkpoint bytes into the config echo and named tensors. Never
/// panics on malformed input.
pub fn parse_checkpoint(bytes: &[u8]) -> Result<(Config, Vec<(String, Tensor)>), CheckpointError> {
    if bytes.len() < 4 {
        return Err(CheckpointError::Truncated);
    }
    if &bytes[..4] != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    if bytes.len() < 16 {
        return Err(CheckpointError::Truncated);
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(CheckpointError::UnsupportedVersion(version));
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
    let header_len = usize::try_from(header_len).map_err(|_| CheckpointError::Truncated)?;
    let header_end = 16_usize
        .checked_add(header_len)
        .ok_or(CheckpointError::Truncated)?;
    if bytes.len() < header_end {
        return Err(CheckpointError::Truncated);
    }
    let header: Header = serde_json::from_slice(&bytes[16..header_end])
        .map_err(|e| CheckpointError::CorruptHeader(e.to_string()))?;

    let mut total: usize = 0;
    let mut numels = Vec::with_capacity(header.tensors.len());
    for entry in &header.tensors {
        let mut numel: usize = 1;
        for &d in &entry.shape {
            numel = numel.checked_mul(d).ok_or(CheckpointError::BadPayloadSize)?;
        }
        total = total.checked_add(numel).ok_or(CheckpointError::BadPayloadSize)?;
        numels.push(numel);
    }
    let payload = &bytes[header_end..];
    let expected_bytes = total.checked_mul(8).ok_or(CheckpointError::BadPayloadSize)?;
    if payload.len() != expected_bytes {
        return Err(CheckpointError::BadPayloadSize);
    }

    let mut tensors = Vec::with_capacity(header.tensors.len());
    let mut offset = 0;
    for (entry, numel) in header.tensors.into_iter().zip(numels) {
        let mut data = Vec::with_capacity(numel);
        for i in 0..numel {
            let start = (offset + i) * 8;
            data.push(f64::from_le_bytes(payload[start..start + 8].try_into().unwrap()));
        }
        offset += numel;
        tensors.push((entry.name, Tensor::new(&entry.shape, data)));
    }
    Ok((header.config, tensors))
}

pub fn save_checkpoint(
    path: &Path,
    config: &Config,
    store: &ParamStore,
) -> Result<(), CheckpointError> {
    std::fs::write(path, encode_checkpoint(config, store))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(Config, Vec<(String, Tensor)>), CheckpointError> {
    let bytes = std::fs::read(path)?;
    parse_checkpoint(&bytes)
}
