//! Checkpoint container: an 8-byte magic, a little-endian `u64` header length,
//! a JSON header (format version, model config, optional emission order and a
//! tensor directory of name, shape and byte offset), then every tensor as
//! little-endian `f64`, row-major, in directory order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{JrlModel, JrlParams, ModelConfig};
use crate::data::OrderSpec;
use crate::error::{JrlError, Result};
use crate::numerics::Scalar;
use crate::tensor::ParamSet;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"JRLCKPT\0";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format_version: u32,
    config: ModelConfig,
    #[serde(default)]
    order: Option<OrderSpec>,
    tensors: Vec<TensorEntry>,
}

/// A model together with the emission order it was trained under.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<T> {
    pub model: JrlModel<T>,
    pub order: Option<OrderSpec>,
}

fn corrupt(msg: impl Into<String>) -> JrlError {
    JrlError::CorruptCheckpoint(msg.into())
}

impl<T: Scalar> Checkpoint<T> {
    pub fn new(model: JrlModel<T>, order: Option<OrderSpec>) -> Self {
        Checkpoint { model, order }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let tensors = self.model.params.tensors();
        let mut offset = 0u64;
        let entries = tensors
            .iter()
            .map(|t| {
                let e = TensorEntry {
                    name: t.name.clone(),
                    shape: t.shape.clone(),
                    offset,
                };
                offset += 8 * t.data.len() as u64;
                e
            })
            .collect();
        let header = Header {
            format_version: CHECKPOINT_VERSION,
            config: self.model.config.clone(),
            order: self.order.clone(),
            tensors: entries,
        };
        let json = serde_json::to_vec(&header).map_err(|e| corrupt(e.to_string()))?;
        let mut out = Vec::with_capacity(16 + json.len() + offset as usize);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for t in &tensors {
            for v in t.data {
                out.extend_from_slice(&v.to_f64_lossy().to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 || &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(corrupt("missing checkpoint magic"));
        }
        let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8-byte slice"));
        let header_end = usize::try_from(header_len)
            .ok()
            .and_then(|n| n.checked_add(16))
            .filter(|&end| end <= bytes.len())
            .ok_or_else(|| corrupt("header extends past end of file"))?;
        let value: serde_json::Value =
            serde_json::from_slice(&bytes[16..header_end]).map_err(|e| corrupt(format!("header: {e}")))?;
        let version = value
            .get("format_version")
            .and_then(|v| v.as_u64())
            .ok_or_else(|| corrupt("header lacks format_version"))?;
        if version != CHECKPOINT_VERSION as u64 {
            return Err(JrlError::CheckpointVersion {
                expected: CHECKPOINT_VERSION,
                found: u32::try_from(version).unwrap_or(u32::MAX),
            });
        }
        let header: Header = serde_json::from_value(value).map_err(|e| corrupt(format!("header: {e}")))?;
        header
            .config
            .validate()
            .map_err(|e| corrupt(format!("stored config: {e}")))?;
        let data = &bytes[header_end..];

        let mut params = JrlParams::<T>::zeros(&header.config);
        let expected: Vec<(String, Vec<usize>)> = params
            .tensors()
            .into_iter()
            .map(|t| (t.name, t.shape))
            .collect();
        if expected.len() != header.tensors.len() {
            return Err(corrupt(format!(
                "directory lists {} tensors, configuration needs {}",
                header.tensors.len(),
                expected.len()
            )));
        }
        let mut cursor = 0u64;
        for ((name, shape), entry) in expected.iter().zip(&header.tensors) {
            if *name != entry.name {
                return Err(corrupt(format!("expected tensor {name}, found {}", entry.name)));
            }
            if *shape != entry.shape {
                return Err(JrlError::CheckpointShape {
                    name: name.clone(),
                    expected: shape.clone(),
                    found: entry.shape.clone(),
                });
            }
            if entry.offset != cursor {
                return Err(corrupt(format!("tensor {name} at offset {}, expected {cursor}", entry.offset)));
            }
            cursor += 8 * shape.iter().product::<usize>() as u64;
        }
        if data.len() as u64 != cursor {
            return Err(corrupt(format!("data section has {} bytes, expected {cursor}", data.len())));
        }
        let mut chunks = data.chunks_exact(8);
        for (slot, (name, _)) in params.tensors_mut().into_iter().zip(&expected) {
            for v in slot.iter_mut() {
                let raw = chunks.next().expect("length checked above");
                let x = f64::from_le_bytes(raw.try_into().expect("8-byte chunk"));
                if !x.is_finite() {
                    return Err(JrlError::NonFinite(format!("checkpoint tensor {name}")));
                }
                *v = T::lit(x);
            }
        }
        Ok(Checkpoint {
            model: JrlModel::from_parts(header.config, params)?,
            order: header.order,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?).map_err(|e| JrlError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| JrlError::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Loads and checks every tensor shape against `config`.
    pub fn load_for(path: &Path, config: &ModelConfig) -> Result<Self> {
        let ck = Self::load(path)?;
        let want = JrlParams::<T>::zeros(config);
        for (w, g) in want.tensors().iter().zip(ck.model.params.tensors()) {
            if w.name != g.name || w.shape != g.shape {
                return Err(JrlError::CheckpointShape {
                    name: w.name.clone(),
                    expected: w.shape.clone(),
                    found: g.shape,
                });
            }
        }
        if want.tensors().len() != ck.model.params.tensors().len() {
            return Err(JrlError::InvalidConfig("checkpoint layout differs from configuration".into()));
        }
        Ok(ck)
    }
}
