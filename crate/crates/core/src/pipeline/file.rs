//! `MCSH` packed model file: magic, version, JSON header, binary sections,
//! SHA-256 trailer.
//!
//! ```text
//! "MCSH" | u32 version | u64 header length | header JSON | sections | sha256
//! ```
//!
//! Packed matrices are stored as `PKDW` sections, unquantized matrices as
//! little-endian float64, and the optional router set as JSON. Offsets in
//! the header are relative to the start of the section area; the checksum
//! covers every preceding byte.

use super::QuantizedModel;
use crate::error::{Error, Result};
use crate::moe::{MoEConfig, MoEModel};
use crate::otp::RouterSet;
use crate::quant::PackedMatrix;
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::path::Path;

const MAGIC: &[u8; 4] = b"MCSH";
pub const FILE_VERSION: u32 = 1;
const CHECKSUM_LEN: usize = 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SectionKind {
    Pkdw,
    F64,
    Router,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SectionEntry {
    pub name: String,
    pub kind: SectionKind,
    pub offset: u64,
    pub length: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FileHeader {
    pub config: MoEConfig,
    pub config_hash: String,
    pub group_size: usize,
    /// Routed-expert widths `[layer][expert]`.
    pub allocation: Vec<Vec<u8>>,
    pub sections: Vec<SectionEntry>,
}

/// Everything stored in one packed model file.
#[derive(Clone, Debug)]
pub struct PackedModelFile {
    pub quantized: QuantizedModel,
    pub routers: Option<RouterSet>,
    pub config_hash: String,
}

impl PackedModelFile {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let q = &self.quantized;
        let mut body = Vec::new();
        let mut sections = Vec::new();
        let mut push = |name: String, kind, bytes: &[u8]| {
            sections.push(SectionEntry {
                name,
                kind,
                offset: body.len() as u64,
                length: bytes.len() as u64,
            });
            body.extend_from_slice(bytes);
        };
        for id in q.model.param_ids() {
            match q.packed.get(&id) {
                Some(p) => push(id.name(), SectionKind::Pkdw, &p.to_bytes()),
                None => {
                    let raw: Vec<u8> = q
                        .model
                        .param(id)
                        .data()
                        .iter()
                        .flat_map(|v| v.to_le_bytes())
                        .collect();
                    push(id.name(), SectionKind::F64, &raw);
                }
            }
        }
        if let Some(r) = &self.routers {
            push(
                "routers".into(),
                SectionKind::Router,
                r.to_json()?.as_bytes(),
            );
        }
        let header = FileHeader {
            config: q.model.config.clone(),
            config_hash: self.config_hash.clone(),
            group_size: q.group_size,
            allocation: q.bits(),
            sections,
        };
        let hjson = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(16 + hjson.len() + body.len() + CHECKSUM_LEN);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FILE_VERSION.to_le_bytes());
        out.extend_from_slice(&(hjson.len() as u64).to_le_bytes());
        out.extend_from_slice(&hjson);
        out.extend_from_slice(&body);
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        Ok(out)
    }

    /// Verifies the checksum and parses the header without decoding sections.
    pub fn read_header(bytes: &[u8]) -> Result<(FileHeader, &[u8])> {
        if bytes.len() < 16 + CHECKSUM_LEN {
            return Err(Error::Format("file too short for an MCSH model".into()));
        }
        if &bytes[..4] != MAGIC {
            return Err(Error::Format("missing MCSH magic".into()));
        }
        let (content, digest) = bytes.split_at(bytes.len() - CHECKSUM_LEN);
        if Sha256::digest(content).as_slice() != digest {
            return Err(Error::Format("checksum mismatch".into()));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != FILE_VERSION {
            return Err(Error::Format(format!("unsupported MCSH version {version}")));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let hend = 16usize
            .checked_add(hlen)
            .filter(|&e| e <= content.len())
            .ok_or_else(|| Error::Format("header length beyond end of file".into()))?;
        let header: FileHeader = serde_json::from_slice(&bytes[16..hend])?;
        Ok((header, &content[hend..]))
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (header, body) = Self::read_header(bytes)?;
        header.config.validate()?;
        let section = |e: &SectionEntry| -> Result<&[u8]> {
            let start = e.offset as usize;
            let end = start
                .checked_add(e.length as usize)
                .filter(|&x| x <= body.len())
                .ok_or_else(|| Error::Format(format!("section {} out of bounds", e.name)))?;
            Ok(&body[start..end])
        };
        let by_name: BTreeMap<&str, &SectionEntry> = header
            .sections
            .iter()
            .map(|e| (e.name.as_str(), e))
            .collect();
        let mut base = MoEModel::zeros(&header.config)?;
        let mut packed = BTreeMap::new();
        for id in base.param_ids() {
            let name = id.name();
            let entry = by_name
                .get(name.as_str())
                .ok_or_else(|| Error::Format(format!("missing section {name}")))?;
            let raw = section(entry)?;
            match entry.kind {
                SectionKind::Pkdw => {
                    let (p, used) = PackedMatrix::from_bytes(raw)?;
                    if used != raw.len() {
                        return Err(Error::Format(format!("trailing bytes in section {name}")));
                    }
                    packed.insert(id, p);
                }
                SectionKind::F64 => {
                    let slot = base.param_mut(id);
                    if raw.len() != slot.len() * 8 {
                        return Err(Error::Format(format!(
                            "section {name} has {} bytes",
                            raw.len()
                        )));
                    }
                    let data = raw
                        .chunks_exact(8)
                        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                        .collect();
                    *slot = Tensor::new(slot.shape().to_vec(), data)?;
                }
                SectionKind::Router => {
                    return Err(Error::Format(format!("router section named {name}")))
                }
            }
        }
        let quantized = QuantizedModel::from_parts(base, packed, header.group_size)?;
        if quantized.bits() != header.allocation {
            return Err(Error::Format(
                "header allocation disagrees with packed sections".into(),
            ));
        }
        let routers = match by_name.get("routers") {
            Some(e) if e.kind == SectionKind::Router => {
                let text = std::str::from_utf8(section(e)?)
                    .map_err(|_| Error::Format("router section not UTF-8".into()))?;
                Some(RouterSet::from_json(text)?)
            }
            Some(_) => return Err(Error::Format("routers section has the wrong kind".into())),
            None => None,
        };
        Ok(PackedModelFile {
            quantized,
            routers,
            config_hash: header.config_hash,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        super::write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)
            .map_err(|e| Error::MissingInput(format!("cannot read {}: {e}", path.display())))?;
        Self::from_bytes(&bytes)
    }
}
