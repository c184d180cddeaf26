//! `DMTC` checkpoint files.
//!
//! ```text
//! "DMTC" | u32 version (=1) | u64 metadata length | metadata (UTF-8 JSON)
//! payload: raw little-endian tensors at the offsets declared in metadata
//! ```
//!
//! Metadata is `{"format_version", "attrs": {string: string}, "tensors": [{name, shape, dtype, offset}]}`.
//! Offsets count from the first payload byte; tensors are laid out
//! contiguously in declaration order.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{CheckpointError, Error, Result};
use crate::tensor::TensorBuf;
use crate::vit::{ViTConfig, ViTEncoder};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"DMTC";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    F64,
}

impl DType {
    pub fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            DType::F32 => "f32",
            DType::F64 => "f64",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: DType,
    pub offset: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Metadata {
    format_version: u32,
    attrs: BTreeMap<String, String>,
    tensors: Vec<TensorEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub dtype: DType,
    pub tensor: TensorBuf,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub attrs: BTreeMap<String, String>,
    pub tensors: Vec<NamedTensor>,
}

impl Checkpoint {
    pub fn push(&mut self, name: impl Into<String>, tensor: TensorBuf, dtype: DType) {
        self.tensors.push(NamedTensor {
            name: name.into(),
            dtype,
            tensor,
        });
    }

    pub fn attr(&self, key: &str) -> Option<&str> {
        self.attrs.get(key).map(String::as_str)
    }

    pub fn require_attr(&self, key: &str) -> Result<&str> {
        self.attr(key).ok_or_else(|| {
            CheckpointError::InconsistentMetadata(format!("missing attribute `{key}`")).into()
        })
    }

    pub fn get(&self, name: &str) -> Option<&TensorBuf> {
        self.tensors.iter().find(|t| t.name == name).map(|t| &t.tensor)
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(|t| t.tensor.len()).sum()
    }

    /// Scalars in tensors whose name starts with `prefix`.
    pub fn num_scalars_with_prefix(&self, prefix: &str) -> usize {
        self.tensors
            .iter()
            .filter(|t| t.name.starts_with(prefix))
            .map(|t| t.tensor.len())
            .sum()
    }

    pub fn entries(&self) -> Vec<TensorEntry> {
        let mut offset = 0u64;
        self.tensors
            .iter()
            .map(|t| {
                let e = TensorEntry {
                    name: t.name.clone(),
                    shape: t.tensor.shape().to_vec(),
                    dtype: t.dtype,
                    offset,
                };
                offset += (t.tensor.len() * t.dtype.size()) as u64;
                e
            })
            .collect()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let meta = Metadata {
            format_version: CHECKPOINT_VERSION,
            attrs: self.attrs.clone(),
            tensors: self.entries(),
        };
        let json = serde_json::to_vec(&meta).expect("metadata serializes");
        let mut out = Vec::with_capacity(16 + json.len() + self.num_scalars() * 8);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for t in &self.tensors {
            match t.dtype {
                DType::F64 => {
                    for v in t.tensor.data() {
                        out.extend_from_slice(&v.to_le_bytes());
                    }
                }
                DType::F32 => {
                    for v in t.tensor.data() {
                        out.extend_from_slice(&(*v as f32).to_le_bytes());
                    }
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> std::result::Result<Self, CheckpointError> {
        let (meta, payload) = read_header(bytes)?;
        let mut expected_offset = 0u64;
        let mut tensors = Vec::with_capacity(meta.tensors.len());
        for e in &meta.tensors {
            if tensors.iter().any(|t: &NamedTensor| t.name == e.name) {
                return Err(CheckpointError::InconsistentMetadata(format!(
                    "duplicate tensor `{}`",
                    e.name
                )));
            }
            if e.shape.is_empty() || e.shape.iter().any(|&d| d == 0) {
                return Err(CheckpointError::InconsistentMetadata(format!(
                    "tensor `{}` has invalid shape {:?}",
                    e.name, e.shape
                )));
            }
            if e.offset != expected_offset {
                return Err(CheckpointError::InconsistentMetadata(format!(
                    "tensor `{}` declared at offset {}, expected {expected_offset}",
                    e.name, e.offset
                )));
            }
            let count: usize = e.shape.iter().product();
            let nbytes = (count * e.dtype.size()) as u64;
            let end = e.offset + nbytes;
            if end > payload.len() as u64 {
                return Err(CheckpointError::Truncated {
                    what: format!("tensor `{}`", e.name),
                    needed: nbytes,
                    available: (payload.len() as u64).saturating_sub(e.offset),
                });
            }
            let raw = &payload[e.offset as usize..end as usize];
            let data: Vec<f64> = match e.dtype {
                DType::F64 => raw
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
                DType::F32 => raw
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                    .collect(),
            };
            let tensor = TensorBuf::new(e.shape.clone(), data)
                .map_err(|err| CheckpointError::Corrupt(format!("tensor `{}`: {err}", e.name)))?;
            tensors.push(NamedTensor {
                name: e.name.clone(),
                dtype: e.dtype,
                tensor,
            });
            expected_offset = end;
        }
        if (payload.len() as u64) > expected_offset {
            return Err(CheckpointError::InconsistentMetadata(format!(
                "{} trailing payload bytes",
                payload.len() as u64 - expected_offset
            )));
        }
        Ok(Self {
            attrs: meta.attrs,
            tensors,
        })
    }
}

fn read_header(bytes: &[u8]) -> std::result::Result<(Metadata, &[u8]), CheckpointError> {
    let need = |what: &str, needed: usize| CheckpointError::Truncated {
        what: what.to_string(),
        needed: needed as u64,
        available: bytes.len() as u64,
    };
    if bytes.len() < 4 {
        return Err(need("magic", 4));
    }
    if &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(CheckpointError::BadMagic {
            found: bytes[..4].try_into().unwrap(),
        });
    }
    if bytes.len() < 16 {
        return Err(need("header", 16));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(CheckpointError::UnsupportedVersion(version));
    }
    let meta_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
    let meta_end = 16u64.checked_add(meta_len).filter(|&e| e <= bytes.len() as u64);
    let Some(meta_end) = meta_end else {
        return Err(CheckpointError::Truncated {
            what: "metadata".into(),
            needed: meta_len,
            available: bytes.len() as u64 - 16,
        });
    };
    let meta: Metadata = serde_json::from_slice(&bytes[16..meta_end as usize])
        .map_err(|e| CheckpointError::Corrupt(format!("metadata: {e}")))?;
    if meta.format_version != version {
        return Err(CheckpointError::InconsistentMetadata(format!(
            "metadata format_version {} vs header version {version}",
            meta.format_version
        )));
    }
    Ok((meta, &bytes[meta_end as usize..]))
}

/// Header version and tensor table without decoding payloads.
pub fn inspect_bytes(bytes: &[u8]) -> std::result::Result<(u32, BTreeMap<String, String>, Vec<TensorEntry>), CheckpointError> {
    // full decode so every structural check runs
    Checkpoint::from_bytes(bytes)?;
    let (meta, _) = read_header(bytes)?;
    Ok((meta.format_version, meta.attrs, meta.tensors))
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, ckpt.to_bytes()).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(Checkpoint::from_bytes(&bytes)?)
}

pub(crate) fn vit_attrs(prefix: &str, c: &ViTConfig, attrs: &mut BTreeMap<String, String>) {
    for (k, v) in [
        ("image_size", c.image_size),
        ("patch_size", c.patch_size),
        ("depth", c.depth),
        ("embed_dim", c.embed_dim),
        ("num_heads", c.num_heads),
        ("mlp_ratio", c.mlp_ratio),
    ] {
        attrs.insert(format!("{prefix}.{k}"), v.to_string());
    }
}

pub fn vit_from_attrs(prefix: &str, ckpt: &Checkpoint) -> Result<ViTConfig> {
    let get = |k: &str| -> Result<usize> {
        let key = format!("{prefix}.{k}");
        ckpt.require_attr(&key)?.parse().map_err(|_| {
            CheckpointError::InconsistentMetadata(format!("attribute `{key}` is not an integer")).into()
        })
    };
    Ok(ViTConfig {
        image_size: get("image_size")?,
        patch_size: get("patch_size")?,
        depth: get("depth")?,
        embed_dim: get("embed_dim")?,
        num_heads: get("num_heads")?,
        mlp_ratio: get("mlp_ratio")?,
    })
}

/// Encoder tensors under `prefix`, in canonical order.
pub(crate) fn encoder_from_prefixed(prefix: &str, config: &ViTConfig, ckpt: &Checkpoint) -> Result<ViTEncoder> {
    let named = config
        .param_shapes()
        .into_iter()
        .map(|(name, _)| {
            let full = format!("{prefix}{name}");
            ckpt.get(&full)
                .cloned()
                .map(|t| (name, t))
                .ok_or_else(|| CheckpointError::InconsistentMetadata(format!("missing tensor `{full}`")).into())
        })
        .collect::<Result<Vec<_>>>()?;
    ViTEncoder::from_named(config, named)
        .map_err(|e| CheckpointError::InconsistentMetadata(e.to_string()).into())
}

/// Standalone encoder checkpoint (`kind = encoder`).
pub fn encoder_checkpoint(encoder: &ViTEncoder, label: &str, dtype: DType) -> Checkpoint {
    let mut ckpt = Checkpoint::default();
    ckpt.attrs.insert("kind".into(), "encoder".into());
    ckpt.attrs.insert("label".into(), label.into());
    ckpt.attrs.insert("frozen".into(), encoder.is_frozen().to_string());
    vit_attrs("vit", encoder.config(), &mut ckpt.attrs);
    for (name, t) in encoder.named_params() {
        ckpt.push(name, t.clone(), dtype);
    }
    ckpt
}

pub fn encoder_from_checkpoint(ckpt: &Checkpoint) -> Result<(ViTEncoder, String)> {
    let config = vit_from_attrs("vit", ckpt)?;
    let mut enc = encoder_from_prefixed("", &config, ckpt)?;
    if ckpt.attr("frozen") == Some("true") {
        enc.freeze();
    }
    Ok((enc, ckpt.attr("label").unwrap_or("").to_string()))
}
