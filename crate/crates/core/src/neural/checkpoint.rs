//! Binary checkpoint files.
//!
//! Layout: an 8-byte little-endian header length, a UTF-8 JSON header
//! `{"format_version", "kind", "config", "params": [{"name", "shape"}]}`,
//! then every parameter as little-endian `f32` values in manifest order.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use super::{NeuralError, Tensor};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct CheckpointHeader {
    pub format_version: u32,
    /// Model family, e.g. `"scorer"` or `"generator"`.
    pub kind: String,
    /// Model-specific configuration.
    pub config: serde_json::Value,
    pub params: Vec<ManifestEntry>,
}

pub fn encode(kind: &str, config: serde_json::Value, params: &ParamStore) -> Vec<u8> {
    let header = CheckpointHeader {
        format_version: FORMAT_VERSION,
        kind: kind.to_string(),
        config,
        params: params
            .iter()
            .map(|(_, name, t)| ManifestEntry {
                name: name.to_string(),
                shape: t.shape().to_vec(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(8 + json.len() + 4 * params.num_scalars());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, _, t) in params.iter() {
        for &v in t.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out
}

pub fn decode(bytes: &[u8]) -> Result<(CheckpointHeader, ParamStore), NeuralError> {
    let bad = |msg: &str| NeuralError::Checkpoint(msg.to_string());
    if bytes.len() < 8 {
        return Err(bad("truncated header length"));
    }
    let hlen = u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes")) as usize;
    let body = bytes.get(8..8 + hlen).ok_or_else(|| bad("truncated header"))?;
    let header: CheckpointHeader =
        serde_json::from_slice(body).map_err(|e| bad(&format!("header: {e}")))?;
    if header.format_version != FORMAT_VERSION {
        return Err(bad(&format!(
            "unsupported format version {}",
            header.format_version
        )));
    }
    let mut offset = 8 + hlen;
    let mut store = ParamStore::new();
    for entry in &header.params {
        let n: usize = entry.shape.iter().product();
        let raw = bytes
            .get(offset..offset + 4 * n)
            .ok_or_else(|| bad(&format!("truncated data for {}", entry.name)))?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect();
        store.add(entry.name.clone(), Tensor::new(entry.shape.clone(), data)?);
        offset += 4 * n;
    }
    if offset != bytes.len() {
        return Err(bad("trailing bytes after parameter data"));
    }
    Ok((header, store))
}

pub fn save(
    path: &Path,
    kind: &str,
    config: serde_json::Value,
    params: &ParamStore,
) -> Result<(), NeuralError> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    let mut f = fs::File::create(path)?;
    f.write_all(&encode(kind, config, params))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<(CheckpointHeader, ParamStore), NeuralError> {
    decode(&fs::read(path)?)
}

/// Overwrites `target` tensors with the loaded ones, requiring an identical
/// manifest.
pub fn restore_into(target: &mut ParamStore, loaded: &ParamStore) -> Result<(), NeuralError> {
    if target.len() != loaded.len() {
        return Err(NeuralError::Checkpoint(format!(
            "manifest has {} tensors, model expects {}",
            loaded.len(),
            target.len()
        )));
    }
    for ((_, tn, tt), (_, ln, lt)) in target.clone().iter().zip(loaded.iter()) {
        if tn != ln || tt.shape() != lt.shape() {
            return Err(NeuralError::Checkpoint(format!(
                "manifest mismatch at {tn}: found {ln} {:?}",
                lt.shape()
            )));
        }
    }
    *target = loaded.clone();
    Ok(())
}
