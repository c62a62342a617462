//! Versioned binary container for trained model parameters.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic  b"TWAR"
//! u32    format version
//! u64    header length in bytes
//! [u8]   JSON header: kind, free-form metadata, tensor table
//! [f64]  tensor payloads, concatenated in table order
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const MAGIC: &[u8; 4] = b"TWAR";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ArtifactError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("not an artifact file (bad magic)")]
    BadMagic,
    #[error("unsupported artifact version {0}")]
    UnsupportedVersion(u32),
    #[error("artifact is truncated")]
    Truncated,
    #[error("artifact header is malformed: {0}")]
    Header(#[from] serde_json::Error),
    #[error("expected a `{expected}` artifact, found `{found}`")]
    KindMismatch { expected: String, found: String },
    #[error("artifact is missing tensor `{0}`")]
    MissingTensor(String),
    #[error("artifact tensor `{0}` has an unexpected shape")]
    BadShape(String),
}

pub type Result<T> = std::result::Result<T, ArtifactError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub len: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    kind: String,
    meta: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Artifact {
    pub kind: String,
    pub meta: serde_json::Value,
    pub tensors: Vec<(String, Vec<usize>, Vec<f64>)>,
}

impl Artifact {
    pub fn new(kind: &str, meta: serde_json::Value) -> Self {
        Self {
            kind: kind.to_string(),
            meta,
            tensors: Vec::new(),
        }
    }

    pub fn push(&mut self, name: &str, shape: &[usize], data: Vec<f64>) {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.tensors.push((name.to_string(), shape.to_vec(), data));
    }

    pub fn tensor(&self, name: &str) -> Result<(&[usize], &[f64])> {
        self.tensors
            .iter()
            .find(|(n, _, _)| n == name)
            .map(|(_, s, d)| (s.as_slice(), d.as_slice()))
            .ok_or_else(|| ArtifactError::MissingTensor(name.to_string()))
    }

    pub fn expect_kind(&self, kind: &str) -> Result<()> {
        if self.kind != kind {
            return Err(ArtifactError::KindMismatch {
                expected: kind.to_string(),
                found: self.kind.clone(),
            });
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut offset = 0;
        let tensors = self
            .tensors
            .iter()
            .map(|(name, shape, data)| {
                let e = TensorEntry {
                    name: name.clone(),
                    shape: shape.clone(),
                    offset,
                    len: data.len(),
                };
                offset += data.len();
                e
            })
            .collect();
        let header = serde_json::to_vec(&Header {
            kind: self.kind.clone(),
            meta: self.meta.clone(),
            tensors,
        })
        .expect("artifact header serializes");
        let mut out = Vec::with_capacity(16 + header.len() + offset * 8);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for (_, _, data) in &self.tensors {
            for v in data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 {
            return Err(if bytes.len() >= 4 && &bytes[..4] != MAGIC {
                ArtifactError::BadMagic
            } else {
                ArtifactError::Truncated
            });
        }
        if &bytes[..4] != MAGIC {
            return Err(ArtifactError::BadMagic);
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(ArtifactError::UnsupportedVersion(version));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let body = bytes.get(16..16 + hlen).ok_or(ArtifactError::Truncated)?;
        let header: Header = serde_json::from_slice(body)?;
        let payload = &bytes[16 + hlen..];
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for e in header.tensors {
            let start = e.offset * 8;
            let end = start + e.len * 8;
            let raw = payload.get(start..end).ok_or(ArtifactError::Truncated)?;
            if e.shape.iter().product::<usize>() != e.len {
                return Err(ArtifactError::BadShape(e.name));
            }
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            tensors.push((e.name, e.shape, data));
        }
        Ok(Self {
            kind: header.kind,
            meta: header.meta,
            tensors,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|source| ArtifactError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|source| ArtifactError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn rejects_garbage() {
        assert!(matches!(Artifact::from_bytes(b"nope, not one"), Err(ArtifactError::BadMagic)));
        let mut bytes = Artifact::new("x", serde_json::json!({})).to_bytes();
        bytes[4] = 9;
        assert!(matches!(Artifact::from_bytes(&bytes), Err(ArtifactError::UnsupportedVersion(9))));
        let mut a = Artifact::new("x", serde_json::json!({}));
        a.push("w", &[2], vec![1.0, 2.0]);
        let bytes = a.to_bytes();
        assert!(matches!(
            Artifact::from_bytes(&bytes[..bytes.len() - 3]),
            Err(ArtifactError::Truncated)
        ));
    }

    proptest! {
        #[test]
        fn roundtrip_is_bit_exact(data in proptest::collection::vec(any::<f64>(), 0..64), rows in 1usize..4) {
            let cols = data.len() / rows;
            let data: Vec<f64> = data[..rows * cols].to_vec();
            let mut a = Artifact::new("model", serde_json::json!({"seed": 3}));
            a.push("w", &[rows, cols], data.clone());
            a.push("b", &[1], vec![f64::MIN_POSITIVE]);
            let back = Artifact::from_bytes(&a.to_bytes()).unwrap();
            let (shape, got) = back.tensor("w").unwrap();
            prop_assert_eq!(shape, &[rows, cols][..]);
            prop_assert_eq!(got.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), data.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
            prop_assert_eq!(back.meta, a.meta);
        }
    }
}
