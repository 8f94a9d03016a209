//! Binary checkpoints: a JSON header, named little-endian f64 arrays and a
//! SHA-256 trailer.
//!
//! Layout: `FCAPCKPT`, version `u32`, header length `u64`, header JSON,
//! array count `u64`, then per array: name length `u32`, name, rank `u32`,
//! dims `u64 × rank`, data `f64 × numel`; finally 32 checksum bytes over
//! everything before them. All integers are little-endian.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use framecap_tensor::Tensor;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::optim::{AdamConfig, AdamState};

pub const MAGIC: &[u8; 8] = b"FCAPCKPT";
pub const FORMAT_VERSION: u32 = 1;
const M_PREFIX: &str = "adam.m.";
const V_PREFIX: &str = "adam.v.";
const MAX_RANK: usize = 8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub model_config: ModelConfig,
    pub step: u64,
    #[serde(default)]
    pub metrics: serde_json::Value,
    pub adam: Option<AdamHeader>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamHeader {
    pub config: AdamConfig,
    pub step: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub params: BTreeMap<String, Tensor>,
    pub adam: Option<AdamState>,
}

impl Checkpoint {
    pub fn capture(model: &Model, adam: Option<&AdamState>, step: u64, metrics: serde_json::Value) -> Self {
        let params = model
            .store
            .iter()
            .map(|(_, p)| (p.name.clone(), p.value().clone()))
            .collect();
        Self {
            header: CheckpointHeader {
                format_version: FORMAT_VERSION,
                model_config: model.config.clone(),
                step,
                metrics,
                adam: adam.map(|a| AdamHeader {
                    config: a.config,
                    step: a.step,
                }),
            },
            params,
            adam: adam.cloned(),
        }
    }

    /// Rebuilds the model without re-running LM pre-training: every
    /// parameter comes from the checkpoint.
    pub fn to_model(&self) -> Result<Model> {
        let mut model = Model::init(self.header.model_config.clone())?;
        let ids: Vec<_> = model.store.ids().collect();
        if ids.len() != self.params.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint holds {} arrays, model has {} parameters",
                self.params.len(),
                ids.len()
            )));
        }
        for id in ids {
            let name = model.store.name(id).to_string();
            let value = self
                .params
                .get(&name)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter {name}")))?;
            if value.shape() != model.store.value(id).shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter {name} has shape {:?}, expected {:?}",
                    value.shape(),
                    model.store.value(id).shape()
                )));
            }
            *model.store.value_mut(id) = value.clone();
        }
        model.freeze_backbones();
        Ok(model)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        let header = serde_json::to_vec(&self.header).expect("header serializes");
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);

        let mut arrays: Vec<(String, &Tensor)> = self.params.iter().map(|(k, v)| (k.clone(), v)).collect();
        if let Some(adam) = &self.adam {
            arrays.extend(adam.m.iter().map(|(k, v)| (format!("{M_PREFIX}{k}"), v)));
            arrays.extend(adam.v.iter().map(|(k, v)| (format!("{V_PREFIX}{k}"), v)));
        }
        out.extend_from_slice(&(arrays.len() as u64).to_le_bytes());
        for (name, t) in arrays {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.ndim() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() + 4 + 32 || &bytes[..MAGIC.len()] != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file".into()));
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != digest {
            return Err(Error::Checkpoint("checksum mismatch".into()));
        }
        let mut r = Reader { buf: body, pos: MAGIC.len() };
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "format version {version} is not supported (expected {FORMAT_VERSION})"
            )));
        }
        let header_len = r.len_u64()?;
        let header: CheckpointHeader = serde_json::from_slice(r.take(header_len)?)
            .map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;
        if header.format_version != version {
            return Err(Error::Checkpoint("header and file versions disagree".into()));
        }
        let count = r.len_u64()?;
        let mut params = BTreeMap::new();
        let mut m = BTreeMap::new();
        let mut v = BTreeMap::new();
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| Error::Checkpoint("array name is not UTF-8".into()))?
                .to_string();
            let rank = r.u32()? as usize;
            if rank > MAX_RANK {
                return Err(Error::Checkpoint(format!("array {name} has rank {rank}")));
            }
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.len_u64()?);
            }
            let numel = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .filter(|&n| n.checked_mul(8).is_some_and(|b| b <= r.remaining()))
                .ok_or_else(|| Error::Checkpoint(format!("array {name} is truncated")))?;
            let data = r
                .take(numel * 8)?
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            let t = Tensor::new(shape, data).map_err(|e| Error::Checkpoint(format!("array {name}: {e}")))?;
            let slot = if let Some(k) = name.strip_prefix(M_PREFIX) {
                m.insert(k.to_string(), t)
            } else if let Some(k) = name.strip_prefix(V_PREFIX) {
                v.insert(k.to_string(), t)
            } else {
                params.insert(name.clone(), t)
            };
            if slot.is_some() {
                return Err(Error::Checkpoint(format!("duplicate array {name}")));
            }
        }
        if r.remaining() != 0 {
            return Err(Error::Checkpoint("trailing bytes after arrays".into()));
        }
        let adam = match &header.adam {
            Some(h) => Some(AdamState {
                config: h.config,
                step: h.step,
                m,
                v,
            }),
            None if m.is_empty() && v.is_empty() => None,
            None => return Err(Error::Checkpoint("optimizer moments without optimizer header".into())),
        };
        Ok(Self { header, params, adam })
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if n > self.remaining() {
            return Err(Error::Checkpoint("unexpected end of file".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn len_u64(&mut self) -> Result<usize> {
        let v = u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes"));
        usize::try_from(v).map_err(|_| Error::Checkpoint(format!("length {v} overflows")))
    }
}

pub fn save_checkpoint(
    path: &Path,
    model: &Model,
    adam: Option<&AdamState>,
    step: u64,
    metrics: serde_json::Value,
) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let bytes = Checkpoint::capture(model, adam, step, metrics).to_bytes();
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<(Model, Option<AdamState>, CheckpointHeader)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let ck = Checkpoint::from_bytes(&bytes)?;
    let model = ck.to_model()?;
    Ok((model, ck.adam, ck.header))
}
