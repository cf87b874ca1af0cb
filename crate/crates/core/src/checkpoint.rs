//! Single-file model checkpoints.
//!
//! Layout: the 8-byte magic `DIVECKPT`, the header length as a little-endian
//! `u64`, a JSON header, then every tensor's little-endian values
//! concatenated in ascending name order. The header lists each tensor's
//! shape, dtype, byte offset and byte length relative to the payload start.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{DiveError, Result};
use crate::model::{DenseModel, LoraSpec, ModelConfig};
use crate::moe::{ExpertInfo, MoeModel, Routing};
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"DIVECKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub offset: u64,
    pub bytes: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelMeta {
    Dense {
        kept: Option<Vec<Vec<usize>>>,
    },
    Moe {
        n_experts: usize,
        expert_width: usize,
        routing: Routing,
        experts: Vec<ExpertInfo>,
        lora: Option<LoraSpec>,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub format_version: u32,
    pub config: ModelConfig,
    pub model: ModelMeta,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Checkpoint<T> {
    Dense(DenseModel<T>),
    Moe(MoeModel<T>),
}

impl<T: Scalar> Checkpoint<T> {
    pub fn kind(&self) -> &'static str {
        match self {
            Checkpoint::Dense(_) => "dense",
            Checkpoint::Moe(_) => "moe",
        }
    }

    pub fn params(&self) -> &ParamStore<T> {
        match self {
            Checkpoint::Dense(m) => &m.params,
            Checkpoint::Moe(m) => &m.params,
        }
    }

    pub fn config(&self) -> &ModelConfig {
        match self {
            Checkpoint::Dense(m) => &m.config,
            Checkpoint::Moe(m) => &m.config,
        }
    }

    pub fn into_dense(self) -> Result<DenseModel<T>> {
        match self {
            Checkpoint::Dense(m) => Ok(m),
            Checkpoint::Moe(_) => Err(DiveError::State("checkpoint holds an MoE model, expected a dense one".into())),
        }
    }

    pub fn into_moe(self) -> Result<MoeModel<T>> {
        match self {
            Checkpoint::Moe(m) => Ok(m),
            Checkpoint::Dense(_) => Err(DiveError::State("checkpoint holds a dense model, expected an MoE".into())),
        }
    }

    fn meta(&self) -> ModelMeta {
        match self {
            Checkpoint::Dense(m) => ModelMeta::Dense { kept: m.kept.clone() },
            Checkpoint::Moe(m) => ModelMeta::Moe {
                n_experts: m.n_experts,
                expert_width: m.expert_width,
                routing: m.routing,
                experts: m.experts.clone(),
                lora: m.lora,
            },
        }
    }
}

/// The full file contents for `ckpt`.
pub fn encode<T: Scalar>(ckpt: &Checkpoint<T>) -> Result<Vec<u8>> {
    let mut payload = Vec::new();
    let mut tensors = Vec::new();
    for (name, t) in ckpt.params().iter() {
        let offset = payload.len() as u64;
        for &v in t.data() {
            v.write_le(&mut payload);
        }
        tensors.push(TensorEntry {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            dtype: T::DTYPE.to_string(),
            offset,
            bytes: payload.len() as u64 - offset,
        });
    }
    let header = Header {
        format_version: FORMAT_VERSION,
        config: *ckpt.config(),
        model: ckpt.meta(),
        tensors,
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(16 + json.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&payload);
    Ok(out)
}

fn dtype_width(dtype: &str) -> Option<usize> {
    match dtype {
        "f32" => Some(4),
        "f64" => Some(8),
        _ => None,
    }
}

/// Parses only the header; useful for inspecting a file's kind and index.
pub fn decode_header(bytes: &[u8]) -> Result<(Header, usize)> {
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(DiveError::Format("not a checkpoint file (bad magic)".into()));
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let end = 16usize
        .checked_add(len)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| DiveError::Format("header extends past end of file".into()))?;
    let value: serde_json::Value =
        serde_json::from_slice(&bytes[16..end]).map_err(|e| DiveError::Format(format!("unreadable header: {e}")))?;
    let version = value.get("format_version").and_then(|v| v.as_u64());
    if version != Some(FORMAT_VERSION as u64) {
        return Err(DiveError::Compatibility {
            found: version.map_or(0, |v| v.min(u32::MAX as u64) as u32),
            expected: FORMAT_VERSION,
        });
    }
    let header: Header = serde_json::from_value(value).map_err(|e| DiveError::Format(format!("malformed header: {e}")))?;
    Ok((header, end))
}

pub fn decode<T: Scalar>(bytes: &[u8]) -> Result<Checkpoint<T>> {
    let (header, start) = decode_header(bytes)?;
    let payload = &bytes[start..];
    header.config.validate()?;
    let mut params = ParamStore::new();
    let mut cursor = 0u64;
    let mut last: Option<&str> = None;
    for e in &header.tensors {
        if last.is_some_and(|l| l >= e.name.as_str()) {
            return Err(DiveError::Format(format!("tensor `{}` is out of order", e.name)));
        }
        last = Some(&e.name);
        let width = dtype_width(&e.dtype).ok_or_else(|| DiveError::Format(format!("unknown dtype `{}`", e.dtype)))?;
        let numel: usize = e.shape.iter().product();
        if e.offset != cursor || e.bytes != (numel * width) as u64 {
            return Err(DiveError::Format(format!("index entry for `{}` is inconsistent", e.name)));
        }
        let end = (e.offset + e.bytes) as usize;
        if end > payload.len() {
            return Err(DiveError::Format(format!(
                "payload truncated: `{}` needs {end} bytes, file holds {}",
                e.name,
                payload.len()
            )));
        }
        let raw = &payload[e.offset as usize..end];
        let data: Vec<T> = raw
            .chunks_exact(width)
            .map(|c| if width == 4 { T::of(f32::read_le(c) as f64) } else { T::of(f64::read_le(c)) })
            .collect();
        params.insert(e.name.clone(), Tensor::new(&e.shape, data)?);
        cursor = end as u64;
    }
    if cursor != payload.len() as u64 {
        return Err(DiveError::Format(format!(
            "payload holds {} bytes but the index covers {cursor}",
            payload.len()
        )));
    }
    let config = header.config;
    Ok(match header.model {
        ModelMeta::Dense { kept } => Checkpoint::Dense(DenseModel { config, params, kept }),
        ModelMeta::Moe {
            n_experts,
            expert_width,
            routing,
            experts,
            lora,
        } => Checkpoint::Moe(MoeModel {
            config,
            params,
            n_experts,
            expert_width,
            routing,
            experts,
            lora,
        }),
    })
}

/// Writes through a temporary sibling and renames it into place.
pub fn save_checkpoint<T: Scalar>(ckpt: &Checkpoint<T>, path: &Path) -> Result<()> {
    let bytes = encode(ckpt)?;
    let tmp = path.with_extension("tmp");
    let write = || -> std::io::Result<()> {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
        std::fs::rename(&tmp, path)
    };
    write().map_err(|e| DiveError::io(path, e))
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<Checkpoint<T>> {
    let bytes = std::fs::read(path).map_err(|e| DiveError::io(path, e))?;
    decode(&bytes).map_err(|e| e.with_context(format!("loading {}", path.display())))
}

pub fn save_dense<T: Scalar>(m: &DenseModel<T>, path: &Path) -> Result<()> {
    save_checkpoint(&Checkpoint::Dense(m.clone()), path)
}

pub fn save_moe<T: Scalar>(m: &MoeModel<T>, path: &Path) -> Result<()> {
    save_checkpoint(&Checkpoint::Moe(m.clone()), path)
}

pub fn load_dense<T: Scalar>(path: &Path) -> Result<DenseModel<T>> {
    load_checkpoint(path)?.into_dense()
}

pub fn load_moe<T: Scalar>(path: &Path) -> Result<MoeModel<T>> {
    load_checkpoint(path)?.into_moe()
}
