//! Binary checkpoint container.
//!
//! Layout: `b"CCLM"`, format version (u32 LE), header length (u64 LE), UTF-8
//! JSON header, then every tensor as little-endian f32 in header order.
//! Parameters come first, then the first and second Adam moments.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::TrainConfig;
use crate::data::SamplerState;
use crate::engine::Tensor;
use crate::model::ModelParams;
use crate::optim::OptimState;

pub const MAGIC: &[u8; 4] = b"CCLM";
pub const VERSION: u32 = 1;
const PREFIX: usize = 4 + 4 + 8;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("not a checkpoint (bad magic bytes)")]
    BadMagic,
    #[error("unknown checkpoint version {0} (this build reads version {VERSION})")]
    UnknownVersion(u32),
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("tensor `{name}` has shape {found:?}, model expects {expected:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("config hash mismatch: header says {stored}, config hashes to {computed}")]
    ConfigHash { stored: String, computed: String },
}

/// Complete training state after `step` optimizer steps.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub params: ModelParams<f32>,
    pub optim: OptimState<f32>,
    pub step: u64,
    pub sampler: SamplerState,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum Slot {
    Param,
    M,
    V,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    slot: Slot,
    shape: Vec<usize>,
    /// Byte offset from the start of the payload.
    offset: u64,
    count: u64,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    config: TrainConfig,
    config_hash: String,
    step: u64,
    sampler: SamplerState,
    tensors: Vec<TensorEntry>,
}

impl Checkpoint {
    pub fn config_hash(&self) -> String {
        self.config.hash()
    }

    fn slots(&self) -> [(Slot, &BTreeMap<String, Tensor<f32>>); 3] {
        [
            (Slot::Param, &self.params.tensors),
            (Slot::M, &self.optim.m),
            (Slot::V, &self.optim.v),
        ]
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut tensors = Vec::new();
        let mut offset = 0u64;
        for (slot, map) in self.slots() {
            for (name, t) in map {
                let count = t.numel() as u64;
                tensors.push(TensorEntry {
                    name: name.clone(),
                    slot,
                    shape: t.shape().to_vec(),
                    offset,
                    count,
                });
                offset += 4 * count;
            }
        }
        let header = Header {
            config: self.config.clone(),
            config_hash: self.config_hash(),
            step: self.step,
            sampler: self.sampler.clone(),
            tensors,
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(PREFIX + json.len() + offset as usize);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, map) in self.slots() {
            for t in map.values() {
                for x in t.data() {
                    out.extend_from_slice(&x.to_le_bytes());
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let corrupt = |m: String| CheckpointError::Corrupt(m);
        if bytes.len() < 4 || &bytes[..4] != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        if bytes.len() < PREFIX {
            return Err(corrupt(format!("file is {} bytes, shorter than the fixed prefix", bytes.len())));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != VERSION {
            return Err(CheckpointError::UnknownVersion(version));
        }
        let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
        let body = &bytes[PREFIX..];
        if header_len > body.len() as u64 {
            return Err(corrupt(format!(
                "header length {header_len} exceeds the {} remaining bytes",
                body.len()
            )));
        }
        let (json, payload) = body.split_at(header_len as usize);
        let header: Header = serde_json::from_slice(json).map_err(|e| corrupt(format!("header: {e}")))?;

        let computed = header.config.hash();
        if computed != header.config_hash {
            return Err(CheckpointError::ConfigHash {
                stored: header.config_hash,
                computed,
            });
        }
        header.config.model.validate().map_err(|e| corrupt(e.to_string()))?;
        let shapes = header.config.model.param_shapes();

        let expected_bytes: u64 = header.tensors.iter().map(|e| 4 * e.count).sum();
        if payload.len() as u64 != expected_bytes {
            return Err(corrupt(format!(
                "payload is {} bytes, header describes {expected_bytes}",
                payload.len()
            )));
        }

        let mut maps: [BTreeMap<String, Tensor<f32>>; 3] = Default::default();
        let mut cursor = 0u64;
        for e in &header.tensors {
            let want = shapes.get(&e.name).ok_or_else(|| corrupt(format!("unknown tensor `{}`", e.name)))?;
            if &e.shape != want {
                return Err(CheckpointError::ShapeMismatch {
                    name: e.name.clone(),
                    expected: want.clone(),
                    found: e.shape.clone(),
                });
            }
            if e.count != want.iter().product::<usize>() as u64 || e.offset != cursor {
                return Err(corrupt(format!("bad descriptor for `{}`", e.name)));
            }
            let raw = &payload[e.offset as usize..(e.offset + 4 * e.count) as usize];
            let data: Vec<f32> = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let t = Tensor::new(e.shape.clone(), data).map_err(|err| corrupt(err.to_string()))?;
            let slot = match e.slot {
                Slot::Param => 0,
                Slot::M => 1,
                Slot::V => 2,
            };
            if maps[slot].insert(e.name.clone(), t).is_some() {
                return Err(corrupt(format!("duplicate tensor `{}`", e.name)));
            }
            cursor += 4 * e.count;
        }
        for (slot, map) in maps.iter().enumerate() {
            if map.len() != shapes.len() {
                return Err(corrupt(format!(
                    "section {slot} holds {} tensors, model has {}",
                    map.len(),
                    shapes.len()
                )));
            }
        }
        let [params, m, v] = maps;
        Ok(Checkpoint {
            params: ModelParams {
                config: header.config.model.clone(),
                tensors: params,
            },
            optim: OptimState { m, v, t: header.step },
            step: header.step,
            sampler: header.sampler,
            config: header.config,
        })
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<(), CheckpointError> {
    std::fs::write(path, ckpt.to_bytes()).map_err(|source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, CheckpointError> {
    let bytes = std::fs::read(path).map_err(|source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    Checkpoint::from_bytes(&bytes)
}
