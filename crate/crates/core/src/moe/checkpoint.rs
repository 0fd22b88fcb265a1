//! Model checkpoint: `u64` header length, JSON header, then little-endian f64
//! blobs in header-index order.

use super::config::MoEConfig;
use super::model::MoEModel;
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::Path;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the blob region.
    pub offset: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub config: MoEConfig,
    pub seed: u64,
    pub tensors: Vec<TensorEntry>,
}

pub fn to_bytes(model: &MoEModel) -> Result<Vec<u8>> {
    let mut tensors = Vec::new();
    let mut blob = Vec::new();
    for id in model.param_ids() {
        let t = model.param(id);
        tensors.push(TensorEntry {
            name: id.name(),
            shape: t.shape().to_vec(),
            offset: blob.len() as u64,
        });
        for v in t.data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }
    let header = CheckpointHeader {
        format_version: CHECKPOINT_VERSION,
        config: model.config.clone(),
        seed: model.config.seed,
        tensors,
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(8 + json.len() + blob.len());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&blob);
    Ok(out)
}

pub fn from_bytes(bytes: &[u8]) -> Result<MoEModel> {
    let truncated = || Error::Format("checkpoint truncated".into());
    let len_bytes: [u8; 8] = bytes.get(..8).ok_or_else(truncated)?.try_into().unwrap();
    let hlen = u64::from_le_bytes(len_bytes) as usize;
    let json = bytes
        .get(8..8usize.checked_add(hlen).ok_or_else(truncated)?)
        .ok_or_else(truncated)?;
    let header: CheckpointHeader = serde_json::from_slice(json)?;
    if header.format_version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!(
            "unsupported checkpoint version {}",
            header.format_version
        )));
    }
    let blob = &bytes[8 + hlen..];
    let mut model = MoEModel::zeros(&header.config)?;
    let ids = model.param_ids();
    if ids.len() != header.tensors.len() {
        return Err(Error::Format(format!(
            "checkpoint has {} tensors, config implies {}",
            header.tensors.len(),
            ids.len()
        )));
    }
    for (id, entry) in ids.into_iter().zip(&header.tensors) {
        let slot = model.param_mut(id);
        if entry.name != id.name() || entry.shape != slot.shape() {
            return Err(Error::Format(format!(
                "unexpected tensor {} {:?}",
                entry.name, entry.shape
            )));
        }
        let start = entry.offset as usize;
        let end = start + slot.len() * 8;
        let raw = blob.get(start..end).ok_or_else(truncated)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        *slot = Tensor::new(entry.shape.clone(), data)?;
    }
    Ok(model)
}

pub fn save(model: &MoEModel, path: &Path) -> Result<()> {
    let bytes = to_bytes(model)?;
    let tmp = path.with_extension("tmp");
    let mut f = std::fs::File::create(&tmp)?;
    f.write_all(&bytes)?;
    f.sync_all()?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<MoEModel> {
    from_bytes(&std::fs::read(path)?)
}
