//! Checkpoint file: `SSVC` magic, `u32` format version, `u64` header length,
//! a JSON header (config echo and tensor table), then raw `f32`
//! little-endian tensor data. All integers are little-endian.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::params::{Group, ParamSet, Tensor};
use super::{NetworkConfig, ProjectionConfig};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"SSVC";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckpointKind {
    Untrained,
    DinoTeacher,
    DinoStudent,
    Supervised,
    LargeMargin,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub kind: CheckpointKind,
    pub network: NetworkConfig,
    pub projection: Option<ProjectionConfig>,
    /// Free-form provenance (stage configs, epoch counts). Sorted keys.
    pub meta: BTreeMap<String, serde_json::Value>,
    pub params: ParamSet<f32>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    group: Group,
    offset: u64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    kind: CheckpointKind,
    network: NetworkConfig,
    projection: Option<ProjectionConfig>,
    meta: BTreeMap<String, serde_json::Value>,
    tensors: Vec<TensorEntry>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut offset = 0u64;
        let tensors = self
            .params
            .tensors
            .iter()
            .map(|t| {
                let e = TensorEntry { name: t.name.clone(), shape: t.shape.clone(), group: t.group, offset };
                offset += 4 * t.data.len() as u64;
                e
            })
            .collect();
        let header = Header { kind: self.kind, network: self.network.clone(), projection: self.projection.clone(), meta: self.meta.clone(), tensors };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(16 + json.len() + offset as usize);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for t in &self.params.tensors {
            for v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        if bytes.len() < 16 || &bytes[..4] != CHECKPOINT_MAGIC {
            return Err(bad("missing SSVC magic"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported format version {version}")));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let data_start = 16usize.checked_add(hlen).filter(|&e| e <= bytes.len()).ok_or_else(|| bad("truncated header"))?;
        let header: Header = serde_json::from_slice(&bytes[16..data_start]).map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;
        let data = &bytes[data_start..];
        let mut params = ParamSet::new();
        for e in header.tensors {
            let n: usize = e.shape.iter().product();
            let start = e.offset as usize;
            let end = start + 4 * n;
            if end > data.len() {
                return Err(Error::Checkpoint(format!("tensor `{}` runs past end of file", e.name)));
            }
            let values = data[start..end].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
            params.push(Tensor { name: e.name, shape: e.shape, data: values, group: e.group });
        }
        Ok(Self { kind: header.kind, network: header.network, projection: header.projection, meta: header.meta, params })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Hex SHA-256 of the serialized checkpoint.
    pub fn content_hash(&self) -> String {
        hex_digest(&self.to_bytes())
    }

    pub fn param_f64(&self) -> ParamSet<f64> {
        self.params.cast()
    }
}

pub fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}
