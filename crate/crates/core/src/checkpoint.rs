//! Versioned on-disk parameter snapshots.
//!
//! Layout: an 8-byte little-endian header length, the JSON header, then the
//! raw little-endian value blob described by the header manifest.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{AptError, Result};
use crate::params::ParamStore;
use crate::tensor::{Dtype, Tensor};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub name: String,
    pub dtype: Dtype,
    pub shape: Vec<usize>,
    pub byte_offset: usize,
    pub byte_length: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub format_version: u32,
    /// `student`, `causal` or `masked`.
    pub kind: String,
    pub config: Value,
    pub manifest: Vec<ManifestEntry>,
    pub metadata: Value,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub payload: Vec<u8>,
}

impl Checkpoint {
    pub fn from_store(kind: &str, config: Value, store: &ParamStore, metadata: Value) -> Self {
        let mut manifest = Vec::with_capacity(store.len());
        let mut payload = Vec::new();
        for (_, name, t) in store.iter() {
            let start = payload.len();
            match t.dtype() {
                Dtype::F32 => t.data().iter().for_each(|&v| payload.extend_from_slice(&(v as f32).to_le_bytes())),
                Dtype::F64 => t.data().iter().for_each(|&v| payload.extend_from_slice(&v.to_le_bytes())),
            }
            manifest.push(ManifestEntry {
                name: name.to_string(),
                dtype: t.dtype(),
                shape: t.shape().to_vec(),
                byte_offset: start,
                byte_length: payload.len() - start,
            });
        }
        Checkpoint {
            header: CheckpointHeader { format_version: FORMAT_VERSION, kind: kind.to_string(), config, manifest, metadata },
            payload,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.header.format_version != FORMAT_VERSION {
            return Err(AptError::Version { found: self.header.format_version, expected: FORMAT_VERSION });
        }
        let mut spans: Vec<(usize, usize, &str)> = Vec::new();
        for e in &self.header.manifest {
            let count: usize = e.shape.iter().product();
            if e.byte_length != count * e.dtype.size_bytes() {
                return Err(AptError::Checkpoint(format!("`{}`: byte length does not match its shape", e.name)));
            }
            let end = e.byte_offset.checked_add(e.byte_length).filter(|&end| end <= self.payload.len());
            let Some(end) = end else {
                return Err(AptError::Checkpoint(format!("`{}` extends past the payload", e.name)));
            };
            spans.push((e.byte_offset, end, &e.name));
        }
        spans.sort();
        for w in spans.windows(2) {
            if w[1].0 < w[0].1 {
                return Err(AptError::Checkpoint(format!("`{}` overlaps `{}`", w[1].2, w[0].2)));
            }
        }
        Ok(())
    }

    /// Rebuilds the parameter store in manifest order.
    pub fn to_store(&self) -> Result<ParamStore> {
        self.validate()?;
        let dtype = self.header.manifest.first().map(|e| e.dtype).unwrap_or(Dtype::F32);
        let mut store = ParamStore::new(dtype);
        for e in &self.header.manifest {
            let bytes = &self.payload[e.byte_offset..e.byte_offset + e.byte_length];
            let data: Vec<f64> = match e.dtype {
                Dtype::F32 => bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64).collect(),
                Dtype::F64 => bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect(),
            };
            if store.id(&e.name).is_some() {
                return Err(AptError::Checkpoint(format!("duplicate tensor `{}`", e.name)));
            }
            store.add(e.name.clone(), Tensor::new(e.shape.clone(), data, e.dtype)?);
        }
        Ok(store)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&self.header)?;
        let mut out = Vec::with_capacity(8 + header.len() + self.payload.len());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&self.payload);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 {
            return Err(AptError::Checkpoint("file too short for a header".into()));
        }
        let len = u64::from_le_bytes(bytes[..8].try_into().unwrap()) as usize;
        if bytes.len() < 8 + len {
            return Err(AptError::Checkpoint("truncated header".into()));
        }
        // Check the version before the strict schema so old files get a clear error.
        let raw: Value = serde_json::from_slice(&bytes[8..8 + len])?;
        let found = raw.get("format_version").and_then(Value::as_u64).unwrap_or(0) as u32;
        if found != FORMAT_VERSION {
            return Err(AptError::Version { found, expected: FORMAT_VERSION });
        }
        let header: CheckpointHeader = serde_json::from_value(raw)?;
        let ckpt = Checkpoint { header, payload: bytes[8 + len..].to_vec() };
        ckpt.validate()?;
        Ok(ckpt)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}
