//! Binary shard container for generated examples.
//!
//! Layout: magic `MMKDSHRD`, version (u32 LE), header length (u32 LE), JSON
//! header, then one record per example: id u64, noun u16, verb u16,
//! action u16, three tensor blocks (appearance, flow, spectro; each tag u8,
//! dtype u8, ndim u8, dims u32 each, f32 payload) and a layout block (tag u8,
//! frame count u16, per frame: box count u8, boxes as 4×f32 + category u8).
//! All integers and floats are little-endian.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::DatasetConfig;
use super::render::{LayoutBox, MultimodalExample};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const SHARD_MAGIC: &[u8; 8] = b"MMKDSHRD";
pub const SHARD_VERSION: u32 = 1;

const TAG_APPEARANCE: u8 = 0;
const TAG_FLOW: u8 = 1;
const TAG_SPECTRO: u8 = 2;
const TAG_LAYOUT: u8 = 3;
const DTYPE_F32: u8 = 0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShardHeader {
    pub format_version: u32,
    /// `train`, `holdout` or `val`.
    pub split: String,
    pub count: usize,
    pub config: DatasetConfig,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Shard {
    pub header: ShardHeader,
    pub examples: Vec<MultimodalExample>,
}

impl Shard {
    pub fn new(split: &str, config: &DatasetConfig, examples: Vec<MultimodalExample>) -> Self {
        Self {
            header: ShardHeader {
                format_version: SHARD_VERSION,
                split: split.to_string(),
                count: examples.len(),
                config: config.clone(),
            },
            examples,
        }
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn config(&self) -> &DatasetConfig {
        &self.header.config
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&self.header)?;
        let mut out = Vec::new();
        out.extend_from_slice(SHARD_MAGIC);
        out.extend_from_slice(&SHARD_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        for ex in &self.examples {
            out.extend_from_slice(&ex.id.to_le_bytes());
            for label in [ex.noun, ex.verb, ex.action] {
                let v = u16::try_from(label)
                    .map_err(|_| Error::Format(format!("label {label} exceeds u16")))?;
                out.extend_from_slice(&v.to_le_bytes());
            }
            write_tensor(&mut out, TAG_APPEARANCE, &ex.appearance);
            write_tensor(&mut out, TAG_FLOW, &ex.flow);
            write_tensor(&mut out, TAG_SPECTRO, &ex.spectro);
            out.push(TAG_LAYOUT);
            out.extend_from_slice(&(ex.layout.len() as u16).to_le_bytes());
            for frame in &ex.layout {
                out.push(frame.len() as u8);
                for b in frame {
                    for v in [b.x, b.y, b.w, b.h] {
                        out.extend_from_slice(&v.to_le_bytes());
                    }
                    out.push(b.category);
                }
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != SHARD_MAGIC {
            return Err(Error::Format("missing shard magic".into()));
        }
        let version = r.u32()?;
        if version != SHARD_VERSION {
            return Err(Error::Format(format!("unsupported shard version {version}")));
        }
        let hlen = r.u32()? as usize;
        let header: ShardHeader = serde_json::from_slice(r.take(hlen)?)?;
        let mut examples = Vec::with_capacity(header.count);
        for _ in 0..header.count {
            let id = r.u64()?;
            let noun = r.u16()? as usize;
            let verb = r.u16()? as usize;
            let action = r.u16()? as usize;
            let appearance = r.tensor(TAG_APPEARANCE)?;
            let flow = r.tensor(TAG_FLOW)?;
            let spectro = r.tensor(TAG_SPECTRO)?;
            r.expect_tag(TAG_LAYOUT)?;
            let frames = r.u16()? as usize;
            let mut layout = Vec::with_capacity(frames);
            for _ in 0..frames {
                let n = r.u8()? as usize;
                let mut boxes = Vec::with_capacity(n);
                for _ in 0..n {
                    let (x, y, w, h) = (r.f32()?, r.f32()?, r.f32()?, r.f32()?);
                    let category = r.u8()?;
                    boxes.push(LayoutBox { x, y, w, h, category });
                }
                layout.push(boxes);
            }
            examples.push(MultimodalExample {
                id,
                appearance,
                flow,
                layout,
                spectro,
                noun,
                verb,
                action,
            });
        }
        if r.pos != bytes.len() {
            return Err(Error::Format("trailing bytes after last record".into()));
        }
        Ok(Self { header, examples })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

fn write_tensor(out: &mut Vec<u8>, tag: u8, t: &Tensor) {
    out.push(tag);
    out.push(DTYPE_F32);
    out.push(t.ndim() as u8);
    for &d in t.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos + n;
        let s = self
            .bytes
            .get(self.pos..end)
            .ok_or_else(|| Error::Format("truncated shard".into()))?;
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn expect_tag(&mut self, tag: u8) -> Result<()> {
        let got = self.u8()?;
        if got != tag {
            return Err(Error::Format(format!("expected block tag {tag}, found {got}")));
        }
        Ok(())
    }

    fn tensor(&mut self, tag: u8) -> Result<Tensor> {
        self.expect_tag(tag)?;
        let dtype = self.u8()?;
        if dtype != DTYPE_F32 {
            return Err(Error::Format(format!("unsupported dtype {dtype}")));
        }
        let ndim = self.u8()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(self.u32()? as usize);
        }
        let n: usize = shape.iter().product();
        let raw = self.take(n * 4)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Tensor::new(&shape, data)
    }
}
