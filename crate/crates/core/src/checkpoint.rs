//! Binary checkpoint format.
//!
//! ```text
//! pavescan-checkpoint 1\n
//! <header byte length, decimal>\n
//! <header JSON>
//! <payload: little-endian f32 arrays in manifest order>
//! ```
//!
//! The header holds the network config, class names, free-form metadata and
//! one manifest entry per array (`name`, `shape`, `trainable`, `offset`,
//! `len`), with byte offsets relative to the payload start.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use pavescan_tensor::Tensor;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::detector::{Detector, NetworkConfig};
use crate::params::ParamStore;

pub const FORMAT_VERSION: u32 = 1;
const MAGIC: &str = "pavescan-checkpoint";

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("checkpoint {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("unsupported checkpoint version {found} (this build reads {FORMAT_VERSION})")]
    Version { found: String },
    #[error("malformed checkpoint header: {0}")]
    Malformed(String),
    #[error("checkpoint manifest inconsistent: {0}")]
    Inconsistent(String),
    #[error("checkpoint truncated: array {array} needs bytes {start}..{end}, payload has {available}")]
    Truncated {
        array: String,
        start: usize,
        end: usize,
        available: usize,
    },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArrayEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub trainable: bool,
    pub offset: usize,
    pub len: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: NetworkConfig,
    classes: Vec<String>,
    metadata: BTreeMap<String, String>,
    arrays: Vec<ArrayEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: NetworkConfig,
    pub classes: Vec<String>,
    pub metadata: BTreeMap<String, String>,
    pub params: ParamStore<f32>,
}

impl Checkpoint {
    pub fn from_detector(det: &Detector<f32>, classes: Vec<String>, metadata: BTreeMap<String, String>) -> Self {
        Self {
            config: det.config().clone(),
            classes,
            metadata,
            params: det.params().clone(),
        }
    }

    pub fn detector(&self) -> crate::Result<Detector<f32>> {
        Detector::from_params(self.config.clone(), self.params.clone())
    }

    fn payload(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for e in self.params.entries() {
            for v in e.value.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    /// Short content hash of the weights.
    pub fn model_id(&self) -> String {
        let digest = Sha256::digest(self.payload());
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut offset = 0;
        let arrays = self
            .params
            .entries()
            .iter()
            .map(|e| {
                let len = e.value.numel() * 4;
                let entry = ArrayEntry {
                    name: e.name.clone(),
                    shape: e.value.shape().to_vec(),
                    trainable: e.trainable,
                    offset,
                    len,
                };
                offset += len;
                entry
            })
            .collect();
        let header = Header {
            config: self.config.clone(),
            classes: self.classes.clone(),
            metadata: self.metadata.clone(),
            arrays,
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = format!("{MAGIC} {FORMAT_VERSION}\n{}\n", json.len()).into_bytes();
        out.extend_from_slice(&json);
        out.extend_from_slice(&self.payload());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let (line1, rest) = split_line(bytes).ok_or_else(|| CheckpointError::Malformed("missing magic line".into()))?;
        let line1 = std::str::from_utf8(line1).map_err(|_| CheckpointError::Malformed("magic line is not text".into()))?;
        let version = line1
            .strip_prefix(MAGIC)
            .map(str::trim)
            .ok_or_else(|| CheckpointError::Malformed("not a pavescan checkpoint".into()))?;
        if version != FORMAT_VERSION.to_string() {
            return Err(CheckpointError::Version { found: version.to_string() });
        }
        let (line2, rest) = split_line(rest).ok_or_else(|| CheckpointError::Malformed("missing header length".into()))?;
        let header_len: usize = std::str::from_utf8(line2)
            .ok()
            .and_then(|s| s.trim().parse().ok())
            .ok_or_else(|| CheckpointError::Malformed("header length is not a number".into()))?;
        if rest.len() < header_len {
            return Err(CheckpointError::Malformed(format!(
                "header needs {header_len} bytes, file has {}",
                rest.len()
            )));
        }
        let header: Header = serde_json::from_slice(&rest[..header_len])
            .map_err(|e| CheckpointError::Malformed(format!("header JSON: {e}")))?;
        let payload = &rest[header_len..];
        let mut expected = 0;
        let mut params = ParamStore::new();
        for a in &header.arrays {
            let numel: usize = a.shape.iter().product();
            if a.offset != expected || a.len != numel * 4 {
                return Err(CheckpointError::Inconsistent(format!(
                    "array {} at offset {} len {} (expected offset {expected}, len {})",
                    a.name,
                    a.offset,
                    a.len,
                    numel * 4
                )));
            }
            let end = a.offset + a.len;
            if end > payload.len() {
                return Err(CheckpointError::Truncated {
                    array: a.name.clone(),
                    start: a.offset,
                    end,
                    available: payload.len(),
                });
            }
            let data = payload[a.offset..end]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            let t = Tensor::new(a.shape.clone(), data).map_err(|e| CheckpointError::Inconsistent(e.to_string()))?;
            params.add(a.name.clone(), t, a.trainable);
            expected = end;
        }
        if expected != payload.len() {
            return Err(CheckpointError::Inconsistent(format!(
                "payload has {} bytes, manifest covers {expected}",
                payload.len()
            )));
        }
        Ok(Self {
            config: header.config,
            classes: header.classes,
            metadata: header.metadata,
            params,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        std::fs::write(path, self.to_bytes()).map_err(|source| CheckpointError::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let bytes = std::fs::read(path).map_err(|source| CheckpointError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_bytes(&bytes)
    }
}

fn split_line(b: &[u8]) -> Option<(&[u8], &[u8])> {
    let i = b.iter().position(|&c| c == b'\n')?;
    Some((&b[..i], &b[i + 1..]))
}
