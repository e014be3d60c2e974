//! Named tensor collection and its single-file binary format.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! offset 0   magic      "LCAM" (4C 43 41 4D)
//! offset 4   version    u32 = 1
//! offset 8   header_len u64, always a multiple of 8
//! offset 16  header     UTF-8 JSON, right-padded with spaces to header_len
//!            pad        8 zero bytes
//!            payload    f32 values of every record, row-major, header order
//! ```
//!
//! The header lists `{name, shape}` per record, free-form string metadata
//! and the SHA-256 of the payload, so a damaged payload byte is reported as
//! an error instead of loading as a wrong tensor. File size is always
//! `24 + header_len + 4 * total_scalars`.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::tensor::Tensor;

pub const MAGIC: [u8; 4] = *b"LCAM";
pub const VERSION: u32 = 1;
const PREAMBLE: usize = 16;
const PAD: usize = 8;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum WeightsError {
    #[error("bad magic bytes (not a weight file)")]
    BadMagic,
    #[error("unsupported weight file version {0}")]
    UnsupportedVersion(u32),
    #[error("truncated weight file: need {expected} bytes, have {actual}")]
    Truncated { expected: usize, actual: usize },
    #[error("{0} unexpected trailing bytes after payload")]
    TrailingBytes(usize),
    #[error("malformed header: {0}")]
    Header(String),
    #[error("non-zero alignment padding after header")]
    BadPadding,
    #[error("duplicate tensor name '{0}'")]
    DuplicateName(String),
    #[error("tensor '{name}': shape {shape:?} does not match its payload")]
    ShapeMismatch { name: String, shape: Vec<usize> },
    #[error("payload checksum mismatch (file is corrupt)")]
    ChecksumMismatch,
    #[error("missing tensor '{0}'")]
    Missing(String),
}

#[derive(Clone, Debug, Default)]
pub struct WeightStore {
    metadata: BTreeMap<String, String>,
    records: Vec<(String, Tensor)>,
    index: HashMap<String, usize>,
}

impl PartialEq for WeightStore {
    fn eq(&self, other: &Self) -> bool {
        self.metadata == other.metadata && self.records == other.records
    }
}

#[derive(Serialize, Deserialize)]
struct Header {
    metadata: BTreeMap<String, String>,
    payload_sha256: String,
    records: Vec<RecordHeader>,
}

#[derive(Serialize, Deserialize)]
struct RecordHeader {
    name: String,
    shape: Vec<usize>,
}

impl WeightStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<(), WeightsError> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(WeightsError::DuplicateName(name));
        }
        self.index.insert(name.clone(), self.records.len());
        self.records.push((name, tensor));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.records[i].1)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor, WeightsError> {
        self.get(name).ok_or_else(|| WeightsError::Missing(name.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.records.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn total_scalars(&self) -> usize {
        self.records.iter().map(|(_, t)| t.len()).sum()
    }

    pub fn metadata(&self) -> &BTreeMap<String, String> {
        &self.metadata
    }

    pub fn set_metadata(&mut self, key: impl Into<String>, value: impl Into<String>) {
        self.metadata.insert(key.into(), value.into());
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        save_weights(self)
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn payload_bytes(records: &[(String, Tensor)]) -> Vec<u8> {
    let mut out = Vec::with_capacity(4 * records.iter().map(|(_, t)| t.len()).sum::<usize>());
    for (_, t) in records {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn save_weights(ws: &WeightStore) -> Vec<u8> {
    let payload = payload_bytes(&ws.records);
    let header = Header {
        metadata: ws.metadata.clone(),
        payload_sha256: hex(&Sha256::digest(&payload)),
        records: ws
            .records
            .iter()
            .map(|(n, t)| RecordHeader {
                name: n.clone(),
                shape: t.shape().to_vec(),
            })
            .collect(),
    };
    let mut header = serde_json::to_vec(&header).expect("header serializes");
    header.resize(header.len().div_ceil(8) * 8, b' ');

    let mut out = Vec::with_capacity(PREAMBLE + header.len() + PAD + payload.len());
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&[0u8; PAD]);
    out.extend_from_slice(&payload);
    out
}

pub fn load_weights(bytes: &[u8]) -> Result<WeightStore, WeightsError> {
    let truncated = |expected: usize| WeightsError::Truncated {
        expected,
        actual: bytes.len(),
    };
    if bytes.len() < 4 {
        return Err(truncated(PREAMBLE));
    }
    if bytes[0..4] != MAGIC {
        return Err(WeightsError::BadMagic);
    }
    if bytes.len() < PREAMBLE {
        return Err(truncated(PREAMBLE));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(WeightsError::UnsupportedVersion(version));
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
    let header_end = usize::try_from(header_len)
        .ok()
        .and_then(|h| h.checked_add(PREAMBLE))
        .ok_or_else(|| WeightsError::Header("header length overflows".into()))?;
    let payload_start = header_end + PAD;
    if bytes.len() < payload_start {
        return Err(truncated(payload_start));
    }
    let text = std::str::from_utf8(&bytes[PREAMBLE..header_end]).map_err(|e| WeightsError::Header(e.to_string()))?;
    let header: Header = serde_json::from_str(text.trim_end_matches(' ')).map_err(|e| WeightsError::Header(e.to_string()))?;
    if bytes[header_end..payload_start].iter().any(|&b| b != 0) {
        return Err(WeightsError::BadPadding);
    }

    let mut scalars = 0usize;
    for r in &header.records {
        if r.shape.is_empty() || r.shape.contains(&0) {
            return Err(WeightsError::ShapeMismatch {
                name: r.name.clone(),
                shape: r.shape.clone(),
            });
        }
        scalars = r
            .shape
            .iter()
            .try_fold(1usize, |acc, &e| acc.checked_mul(e))
            .and_then(|n| scalars.checked_add(n))
            .ok_or_else(|| WeightsError::Header("scalar count overflows".into()))?;
    }
    let expected_len = payload_start + 4 * scalars;
    if bytes.len() < expected_len {
        return Err(truncated(expected_len));
    }
    if bytes.len() > expected_len {
        return Err(WeightsError::TrailingBytes(bytes.len() - expected_len));
    }
    let payload = &bytes[payload_start..];
    if hex(&Sha256::digest(payload)) != header.payload_sha256 {
        return Err(WeightsError::ChecksumMismatch);
    }

    let mut ws = WeightStore {
        metadata: header.metadata,
        ..WeightStore::default()
    };
    let mut values = payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()));
    for r in header.records {
        let n: usize = r.shape.iter().product();
        let data: Vec<f32> = values.by_ref().take(n).collect();
        let tensor = Tensor::new(r.shape.clone(), data).map_err(|_| WeightsError::ShapeMismatch {
            name: r.name.clone(),
            shape: r.shape,
        })?;
        ws.push(r.name, tensor)?;
    }
    Ok(ws)
}
