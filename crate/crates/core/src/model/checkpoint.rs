//! Binary checkpoint format.
//!
//! Layout: 8-byte magic, `u32` format version, `u64` header length, a JSON
//! header (configuration, partition, mechanism, dtype, frozen flag,
//! metadata, parameter table) and the raw little-endian parameter data in
//! table order. Encoding is deterministic, so save/load/save is
//! byte-identical.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hash::sha256_hex;
use crate::model::params::{ParamGroup, ParamStore};
use crate::model::{FlowModel, ModelConfig, PartitionSpec};
use crate::numerics::Tensor;
use crate::retrospective::MechanismKind;
use crate::scalar::Scalar;

const MAGIC: &[u8; 8] = b"SCOUTCKP";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
    group: ParamGroup,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    config: ModelConfig,
    partition: PartitionSpec,
    mechanism: MechanismKind,
    dtype: String,
    frozen: bool,
    metadata: BTreeMap<String, serde_json::Value>,
    params: Vec<ParamEntry>,
}

/// A model plus the bookkeeping stored alongside it.
#[derive(Debug, Clone)]
pub struct Checkpoint<S: Scalar> {
    pub model: FlowModel<S>,
    /// Teachers are saved frozen.
    pub frozen: bool,
    pub metadata: BTreeMap<String, serde_json::Value>,
}

impl<S: Scalar> Checkpoint<S> {
    pub fn new(model: FlowModel<S>) -> Self {
        Self {
            model,
            frozen: false,
            metadata: BTreeMap::new(),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let m = &self.model;
        let header = Header {
            config: m.config().clone(),
            partition: m.partition().clone(),
            mechanism: m.mechanism(),
            dtype: S::DTYPE.to_string(),
            frozen: self.frozen,
            metadata: self.metadata.clone(),
            params: m
                .params()
                .iter()
                .map(|p| ParamEntry {
                    name: p.name.clone(),
                    shape: p.value.shape().to_vec(),
                    group: p.group,
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(20 + json.len() + m.params().numel() * S::BYTES);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for p in m.params().iter() {
            for &v in p.value.data() {
                v.write_le(&mut out);
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let fail = |msg: &str| Error::Format(msg.to_string());
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(fail("not a checkpoint (bad magic)"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let body = bytes.get(20..).ok_or_else(|| fail("truncated header"))?;
        let json = body.get(..hlen).ok_or_else(|| fail("truncated header"))?;
        let header: Header = serde_json::from_slice(json)?;
        if header.dtype != S::DTYPE {
            return Err(Error::Format(format!(
                "checkpoint holds {} values, expected {}",
                header.dtype,
                S::DTYPE
            )));
        }
        let mut data = &body[hlen..];
        let mut store = ParamStore::new();
        for e in header.params {
            let n: usize = e.shape.iter().product();
            let take = n * S::BYTES;
            if data.len() < take {
                return Err(fail("truncated parameter data"));
            }
            let values = data[..take].chunks_exact(S::BYTES).map(S::read_le).collect();
            data = &data[take..];
            if store.index_of(&e.name).is_some() {
                return Err(Error::Format(format!("duplicate parameter {}", e.name)));
            }
            store.add(e.name, Tensor::new(e.shape, values)?, e.group);
        }
        if !data.is_empty() {
            return Err(fail("trailing bytes after parameter data"));
        }
        let model = FlowModel::from_parts(header.config, header.partition, header.mechanism, store)?;
        Ok(Self {
            model,
            frozen: header.frozen,
            metadata: header.metadata,
        })
    }

    /// Writes the checkpoint and returns the SHA-256 of the file contents.
    pub fn save(&self, path: &Path) -> Result<String> {
        let bytes = self.to_bytes()?;
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        std::fs::write(path, &bytes).map_err(|e| Error::io(path, e))?;
        Ok(sha256_hex(&bytes))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    pub fn checksum(&self) -> Result<String> {
        Ok(sha256_hex(&self.to_bytes()?))
    }
}
