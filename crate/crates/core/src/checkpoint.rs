//! The `SPWV` container.
//!
//! ```text
//! "SPWV"            4 bytes
//! version           u32
//! metadata length   u32, then that many bytes of UTF-8 JSON
//! tensor count      u32
//! per tensor:       name length u32, UTF-8 name, rank u32, dims u32 × rank,
//!                   f32 × Πdims
//! ```
//! All integers and floats are little-endian.

use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig, ModelParams};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"SPWV";
pub const FORMAT_VERSION: u32 = 1;

pub fn encode_container(metadata: &str, tensors: &[(String, Tensor)]) -> Vec<u8> {
    let payload: usize = tensors
        .iter()
        .map(|(n, t)| 12 + n.len() + 4 * (t.rank() + t.numel()))
        .sum();
    let mut out = Vec::with_capacity(16 + metadata.len() + payload);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(metadata.len() as u32).to_le_bytes());
    out.extend_from_slice(metadata.as_bytes());
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::Truncated(format!(
                "{what}: need {n} bytes at offset {}, file has {}",
                self.pos,
                self.bytes.len()
            ))),
        }
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4, what)?.try_into().expect("4 bytes"),
        ))
    }

    fn string(&mut self, len: usize, what: &str) -> Result<String> {
        String::from_utf8(self.take(len, what)?.to_vec())
            .map_err(|_| Error::Format(format!("{what} is not UTF-8")))
    }
}

/// Inverse of [`encode_container`]: `(metadata, tensors)`.
pub fn decode_container(bytes: &[u8]) -> Result<(String, Vec<(String, Tensor)>)> {
    let mut r = Reader { bytes, pos: 0 };
    let magic = r.take(4, "magic")?;
    if magic != MAGIC {
        return Err(Error::BadMagic {
            expected: MAGIC.to_vec(),
            found: magic.to_vec(),
        });
    }
    let version = r.u32("version")?;
    if version != FORMAT_VERSION {
        return Err(Error::Version {
            expected: FORMAT_VERSION,
            found: version,
        });
    }
    let meta_len = r.u32("metadata length")? as usize;
    let meta = r.string(meta_len, "metadata")?;
    let count = r.u32("tensor count")? as usize;
    let mut tensors = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let name_len = r.u32("tensor name length")? as usize;
        let name = r.string(name_len, "tensor name")?;
        let rank = r.u32("tensor rank")? as usize;
        let mut shape = Vec::with_capacity(rank.min(16));
        for _ in 0..rank {
            shape.push(r.u32("tensor dims")? as usize);
        }
        let numel = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::Format(format!("tensor {name} is too large")))?;
        let raw = r.take(numel.saturating_mul(4), &format!("tensor {name} payload"))?;
        let data = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
            .collect();
        let t =
            Tensor::new(shape, data).map_err(|e| Error::Format(format!("tensor {name}: {e}")))?;
        tensors.push((name, t));
    }
    if r.pos != bytes.len() {
        return Err(Error::Format(format!(
            "{} trailing bytes after the tensor table",
            bytes.len() - r.pos
        )));
    }
    Ok((meta, tensors))
}

pub fn write_container(path: &Path, metadata: &str, tensors: &[(String, Tensor)]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, encode_container(metadata, tensors)).map_err(|e| Error::io(path, e))
}

pub fn read_container(path: &Path) -> Result<(String, Vec<(String, Tensor)>)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_container(&bytes)
}

pub fn encode_checkpoint(model: &Model) -> Result<Vec<u8>> {
    let meta = serde_json::to_string(&model.config)?;
    Ok(encode_container(&meta, &model.params.named()))
}

/// Decodes a checkpoint and validates every tensor against its config.
pub fn decode_checkpoint(bytes: &[u8]) -> Result<Model> {
    let (meta, tensors) = decode_container(bytes)?;
    let config: ModelConfig = serde_json::from_str(&meta)?;
    let params = ModelParams::from_named(&config, tensors)?;
    Ok(Model { config, params })
}

pub fn save_checkpoint(path: &Path, model: &Model) -> Result<()> {
    write_container(
        path,
        &serde_json::to_string(&model.config)?,
        &model.params.named(),
    )
}

pub fn load_checkpoint(path: &Path) -> Result<Model> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}
