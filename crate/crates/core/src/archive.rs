//! Flat named-tensor container with a JSON header.
//!
//! On disk an archive is:
//!
//! ```text
//! [u64 LE: header byte length][header: UTF-8 JSON][payload: raw tensor bytes]
//! ```
//!
//! The header maps tensor names to `{shape, dtype, offset}` (offsets are
//! relative to the payload start) and carries an optional free-form `meta`
//! object used for things like merge manifests and checkpoint configs.
//! Tensor bytes are little-endian IEEE floats; `f32` is the default storage
//! width, `f64` is available where bit-exact round-trips of in-memory values
//! matter (checkpoints). Serialization is canonical — names sorted, payload
//! packed in name order — so saving the same content twice yields identical
//! bytes.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::ArrayD;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Storage width of one tensor in the payload.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Dtype {
    #[serde(rename = "f32")]
    F32,
    #[serde(rename = "f64")]
    F64,
}

impl Dtype {
    pub fn byte_size(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

/// One named tensor: values are held as `f64` in memory regardless of the
/// on-disk width (`f32 -> f64` is exact, so round-trips preserve bits).
#[derive(Debug, Clone)]
pub struct Entry {
    pub data: ArrayD<f64>,
    pub dtype: Dtype,
}

#[derive(Debug, Serialize, Deserialize)]
struct HeaderEntry {
    shape: Vec<usize>,
    dtype: Dtype,
    offset: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    tensors: BTreeMap<String, HeaderEntry>,
    #[serde(default, skip_serializing_if = "serde_json::Map::is_empty")]
    meta: serde_json::Map<String, serde_json::Value>,
}

/// In-memory archive: ordered name → tensor map plus free-form metadata.
#[derive(Debug, Clone, Default)]
pub struct TensorArchive {
    tensors: BTreeMap<String, Entry>,
    pub meta: serde_json::Map<String, serde_json::Value>,
}

impl TensorArchive {
    pub fn new() -> Self {
        Self::default()
    }

    /// Insert (or replace) a tensor under `name` with the given storage width.
    pub fn insert(&mut self, name: impl Into<String>, data: ArrayD<f64>, dtype: Dtype) {
        self.tensors.insert(name.into(), Entry { data, dtype });
    }

    pub fn get(&self, name: &str) -> Option<&Entry> {
        self.tensors.get(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Tensor names in canonical (sorted) order.
    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(|s| s.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Entry)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    /// Serialize to the canonical byte layout.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut header = Header {
            tensors: BTreeMap::new(),
            meta: self.meta.clone(),
        };
        let mut payload: Vec<u8> = Vec::new();
        for (name, entry) in &self.tensors {
            let offset = payload.len() as u64;
            match entry.dtype {
                Dtype::F32 => {
                    for &v in entry.data.iter() {
                        payload.extend_from_slice(&(v as f32).to_le_bytes());
                    }
                }
                Dtype::F64 => {
                    for &v in entry.data.iter() {
                        payload.extend_from_slice(&v.to_le_bytes());
                    }
                }
            }
            header.tensors.insert(
                name.clone(),
                HeaderEntry {
                    shape: entry.data.shape().to_vec(),
                    dtype: entry.dtype,
                    offset,
                },
            );
        }
        let header_json =
            serde_json::to_vec(&header).expect("archive header serialization cannot fail");
        let mut out = Vec::with_capacity(8 + header_json.len() + payload.len());
        out.extend_from_slice(&(header_json.len() as u64).to_le_bytes());
        out.extend_from_slice(&header_json);
        out.extend_from_slice(&payload);
        out
    }

    /// Parse an archive from bytes, validating header/payload consistency.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 {
            return Err(Error::data(format!(
                "archive truncated: {} bytes is too short for the length prefix",
                bytes.len()
            )));
        }
        let header_len = u64::from_le_bytes(bytes[..8].try_into().unwrap()) as usize;
        if bytes.len() < 8 + header_len {
            return Err(Error::data(format!(
                "archive truncated: header declares {header_len} bytes but only {} remain",
                bytes.len() - 8
            )));
        }
        let header: Header = serde_json::from_slice(&bytes[8..8 + header_len])
            .map_err(|e| Error::data(format!("archive header is not valid JSON: {e}")))?;
        let payload = &bytes[8 + header_len..];
        let mut tensors = BTreeMap::new();
        for (name, he) in header.tensors {
            let count: usize = he.shape.iter().product();
            let nbytes = count * he.dtype.byte_size();
            let start = he.offset as usize;
            let end = start.checked_add(nbytes).ok_or_else(|| {
                Error::data(format!("archive entry '{name}': offset overflow"))
            })?;
            if end > payload.len() {
                return Err(Error::data(format!(
                    "archive entry '{name}': payload range {start}..{end} exceeds payload of {} bytes",
                    payload.len()
                )));
            }
            let raw = &payload[start..end];
            let values: Vec<f64> = match he.dtype {
                Dtype::F32 => raw
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                    .collect(),
                Dtype::F64 => raw
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            };
            let data = ArrayD::from_shape_vec(he.shape.clone(), values).map_err(|e| {
                Error::data(format!("archive entry '{name}': bad shape {:?}: {e}", he.shape))
            })?;
            tensors.insert(name, Entry { data, dtype: he.dtype });
        }
        Ok(TensorArchive { tensors, meta: header.meta })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::fs::File::create(path.as_ref())?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path.as_ref())?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Data(msg) => {
                Error::data(format!("{}: {msg}", path.as_ref().display()))
            }
            other => other,
        })
    }
}
