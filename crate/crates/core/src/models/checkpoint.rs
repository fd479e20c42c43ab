//! Flat parameter container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic      8 bytes   "MPBMCKPT"
//! version    u32       1
//! header_len u64       length of the JSON header in bytes
//! header     JSON      { architecture, seed, step, tensors: [{name, shape}], meta }
//! payload    f64 × n   tensor data in header order, row-major
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::params::ParamSet;
use crate::error::{MpbmError, Result};
use crate::numerics::Tensor;

const MAGIC: &[u8; 8] = b"MPBMCKPT";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub architecture: serde_json::Value,
    pub seed: u64,
    pub step: u64,
    pub tensors: Vec<TensorEntry>,
    #[serde(default)]
    pub meta: serde_json::Value,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub params: ParamSet,
}

impl Checkpoint {
    pub fn new(architecture: serde_json::Value, seed: u64, step: u64, params: ParamSet) -> Self {
        let tensors = params
            .iter()
            .map(|(name, t)| TensorEntry {
                name: name.to_string(),
                shape: t.shape().to_vec(),
            })
            .collect();
        Checkpoint {
            header: CheckpointHeader {
                architecture,
                seed,
                step,
                tensors,
                meta: serde_json::Value::Null,
            },
            params,
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&self.header)?;
        let mut out = Vec::with_capacity(20 + header.len() + 8 * self.params.num_scalars());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for t in self.params.tensors() {
            out.extend_from_slice(&t.to_le_bytes());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |detail: &str| MpbmError::Format {
            format: "checkpoint",
            detail: detail.to_string(),
        };
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(bad("missing magic"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != VERSION {
            return Err(bad(&format!("unsupported version {version}")));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let body = &bytes[20..];
        if body.len() < hlen {
            return Err(bad("truncated header"));
        }
        let header: CheckpointHeader = serde_json::from_slice(&body[..hlen])?;
        let mut payload = &body[hlen..];
        let mut params = ParamSet::new();
        for entry in &header.tensors {
            let n: usize = entry.shape.iter().product();
            if payload.len() < 8 * n {
                return Err(bad(&format!("truncated payload at `{}`", entry.name)));
            }
            let data = payload[..8 * n]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            params.push(entry.name.clone(), Tensor::new(entry.shape.clone(), data)?);
            payload = &payload[8 * n..];
        }
        if !payload.is_empty() {
            return Err(bad("trailing bytes after payload"));
        }
        Ok(Checkpoint { header, params })
    }

    /// Write atomically (temp file + rename) so an interrupted write never
    /// leaves a torn checkpoint behind.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("tmp");
        let mut f = fs::File::create(&tmp).map_err(|e| MpbmError::io(&tmp, e))?;
        f.write_all(&bytes).map_err(|e| MpbmError::io(&tmp, e))?;
        f.sync_all().map_err(|e| MpbmError::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| MpbmError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| MpbmError::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
