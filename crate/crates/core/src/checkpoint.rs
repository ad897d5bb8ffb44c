//! Parameter checkpoint container.
//!
//! Layout: magic `MMKDCKPT`, format version (u32 LE), manifest length (u32 LE),
//! UTF-8 JSON manifest, then raw little-endian `f32` payloads at the byte
//! offsets recorded in the manifest (relative to the start of the payload).

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"MMKDCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: u64,
    pub len: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    /// Free-form description of what the parameters belong to.
    pub model: serde_json::Value,
    pub params: Vec<ParamEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: serde_json::Value,
    pub params: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut entries = Vec::with_capacity(self.params.len());
        let mut offset = 0u64;
        for (name, t) in &self.params {
            let len = (t.numel() * 4) as u64;
            entries.push(ParamEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
                offset,
                len,
            });
            offset += len;
        }
        let manifest = Manifest {
            model: self.model.clone(),
            params: entries,
        };
        let json = serde_json::to_vec(&manifest)?;
        let mut out = Vec::with_capacity(16 + json.len() + offset as usize);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, t) in &self.params {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 || &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(Error::Format("missing checkpoint magic".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!(
                "unsupported checkpoint version {version}"
            )));
        }
        let json_len = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
        let json_end = 16 + json_len;
        let manifest: Manifest = serde_json::from_slice(
            bytes
                .get(16..json_end)
                .ok_or_else(|| Error::Format("truncated manifest".into()))?,
        )?;
        let payload = &bytes[json_end..];
        let mut params = Vec::with_capacity(manifest.params.len());
        for e in manifest.params {
            let start = e.offset as usize;
            let end = start + e.len as usize;
            let raw = payload
                .get(start..end)
                .ok_or_else(|| Error::Format(format!("payload of {} out of bounds", e.name)))?;
            let data: Vec<f32> = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            params.push((e.name, Tensor::new(&e.shape, data)?));
        }
        Ok(Self {
            model: manifest.model,
            params,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}
