//! The `PDLB` named-tensor file.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! b"PDLB" | version: u32 | header_len: u64 | header (UTF-8 JSON) | payload
//! ```
//!
//! The header lists `{name, shape, dtype}` for every tensor plus the run
//! config, seed and step. The payload is each tensor's row-major `f64` data
//! in manifest order.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::mamba::{Model, ModelDims};

pub const MAGIC: &[u8; 4] = b"PDLB";
pub const VERSION: u32 = 1;
const PREAMBLE: usize = 4 + 4 + 8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: [usize; 2],
    dtype: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    tensors: Vec<TensorEntry>,
    config: serde_json::Value,
    seed: u64,
    step: u64,
}

/// Named tensors with the run configuration that produced them.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub tensors: Vec<(String, Matrix)>,
    pub config: serde_json::Value,
    pub seed: u64,
    pub step: u64,
}

impl Checkpoint {
    pub fn new(config: serde_json::Value, seed: u64, step: u64) -> Self {
        Self {
            tensors: Vec::new(),
            config,
            seed,
            step,
        }
    }

    pub fn from_model(model: &Model, config: serde_json::Value, seed: u64, step: u64) -> Self {
        let mut c = Self::new(config, seed, step);
        for (name, m) in model.named_tensors() {
            c.tensors.push((name, m.clone()));
        }
        c
    }

    pub fn push(&mut self, name: impl Into<String>, m: Matrix) {
        self.tensors.push((name.into(), m));
    }

    pub fn get(&self, name: &str) -> Option<&Matrix> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, m)| m)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.iter().map(|(n, _)| n.as_str())
    }

    pub fn to_model(&self, dims: ModelDims) -> Result<Model> {
        Model::from_named(dims, |name| self.get(name).cloned())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            tensors: self
                .tensors
                .iter()
                .map(|(name, m)| TensorEntry {
                    name: name.clone(),
                    shape: [m.rows(), m.cols()],
                    dtype: "f64".into(),
                })
                .collect(),
            config: self.config.clone(),
            seed: self.seed,
            step: self.step,
        };
        let header = serde_json::to_vec(&header).map_err(|e| Error::Format(e.to_string()))?;
        let payload: usize = self.tensors.iter().map(|(_, m)| m.len() * 8).sum();
        let mut out = Vec::with_capacity(PREAMBLE + header.len() + payload);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for (_, m) in &self.tensors {
            for v in m.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < PREAMBLE {
            return Err(Error::Format(format!(
                "truncated preamble: {} bytes, need {PREAMBLE}",
                bytes.len()
            )));
        }
        if &bytes[..4] != MAGIC {
            return Err(Error::Format(format!("bad magic {:?}", &bytes[..4])));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(Error::Format(format!("unsupported version {version}")));
        }
        let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
        let rest = bytes.len() - PREAMBLE;
        if header_len > rest as u64 {
            return Err(Error::Format(format!(
                "header length {header_len} exceeds remaining {rest} bytes"
            )));
        }
        let header_end = PREAMBLE + header_len as usize;
        let header: Header = serde_json::from_slice(&bytes[PREAMBLE..header_end])
            .map_err(|e| Error::Format(format!("header: {e}")))?;
        let mut expected = 0usize;
        for t in &header.tensors {
            if t.dtype != "f64" {
                return Err(Error::Format(format!("tensor {}: dtype {} is not f64", t.name, t.dtype)));
            }
            let n = t.shape[0]
                .checked_mul(t.shape[1])
                .and_then(|n| n.checked_mul(8))
                .ok_or_else(|| Error::Format(format!("tensor {}: shape overflows", t.name)))?;
            expected = expected
                .checked_add(n)
                .ok_or_else(|| Error::Format("payload size overflows".into()))?;
        }
        let payload = &bytes[header_end..];
        if payload.len() != expected {
            return Err(Error::Format(format!(
                "payload length {} does not match manifest ({expected} bytes)",
                payload.len()
            )));
        }
        let mut tensors = Vec::with_capacity(header.tensors.len());
        let mut off = 0;
        for t in header.tensors {
            let [r, c] = t.shape;
            let data = payload[off..off + r * c * 8]
                .chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
                .collect();
            off += r * c * 8;
            tensors.push((t.name, Matrix::from_vec(r, c, data)?));
        }
        Ok(Self {
            tensors,
            config: header.config,
            seed: header.seed,
            step: header.step,
        })
    }

    /// Writes to a sibling temporary file, then renames it over `path`.
    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

/// Writes `bytes` to `path` via a temporary file in the same directory.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let name = path
        .file_name()
        .ok_or_else(|| Error::Config(format!("not a file path: {}", path.display())))?;
    let mut tmp_name = name.to_os_string();
    tmp_name.push(format!(".tmp{}", std::process::id()));
    let tmp = path.with_file_name(tmp_name);
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut c = Checkpoint::new(serde_json::json!({"seed": 3, "task": "x"}), 3, 10);
        c.push("a", Matrix::from_fn(2, 3, |i, j| i as f64 - 0.1 * j as f64));
        c.push("b", Matrix::row_vector(&[f64::MIN_POSITIVE, -0.0, 1e300]));
        c
    }

    #[test]
    fn bytes_round_trip() {
        let c = sample();
        let bytes = c.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn rejects_bad_magic_version_and_truncation() {
        let bytes = sample().to_bytes().unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Checkpoint::from_bytes(&bad).unwrap_err().to_string().contains("magic"));
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(Checkpoint::from_bytes(&bad).unwrap_err().to_string().contains("version"));
        let err = Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).unwrap_err();
        assert!(err.to_string().contains("payload length"), "{err}");
        assert!(Checkpoint::from_bytes(&bytes[..10]).is_err());
    }
}
