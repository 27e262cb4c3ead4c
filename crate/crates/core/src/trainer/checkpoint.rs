//! Binary checkpoint container.
//!
//! Layout, little-endian throughout:
//!
//! ```text
//! "NSCK" | u32 version | u32 tensor count
//! u32 config length | config as key=value lines (UTF-8)
//! per tensor: u16 name length | name | u8 rank | rank × u32 dims | f32 payload
//! ```
//!
//! Trailing unit dimensions are not stored, so a `[c, 1, 1, 1]` bias is written as rank 1.

use std::fs;
use std::path::Path;

use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::model::{build_model, Model, ModelConfig};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"NSCK";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum CheckpointError {
    #[error("bad magic bytes: expected \"NSCK\"")]
    BadMagic,
    #[error("unsupported checkpoint version {found} (expected {FORMAT_VERSION})")]
    UnsupportedVersion { found: u32 },
    #[error("truncated payload: needed {needed} bytes at offset {offset}, file has {len}")]
    Truncated { offset: usize, needed: usize, len: usize },
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
}

/// Trained weights together with the architecture they belong to.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
}

impl Checkpoint {
    pub fn new(model: Model) -> Self {
        Checkpoint { model }
    }

    pub fn config(&self) -> &ModelConfig {
        &self.model.config
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let params = &self.model.params;
        let config = self.model.config.to_kv();
        let mut out = Vec::with_capacity(16 + config.len() + 4 * self.model.parameter_count());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(params.len() as u32).to_le_bytes());
        out.extend_from_slice(&(config.len() as u32).to_le_bytes());
        out.extend_from_slice(config.as_bytes());
        for (name, t) in params {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            let dims = t.dims();
            let rank = dims.iter().rposition(|&d| d != 1).map_or(1, |i| i + 1);
            out.push(rank as u8);
            for &d in &dims[..rank] {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    /// Parses and validates a checkpoint: every tensor named by the stored config must be
    /// present with the dims that config implies, and nothing else.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(CheckpointError::UnsupportedVersion { found: version });
        }
        let count = r.u32()? as usize;
        let config_len = r.u32()? as usize;
        let text = std::str::from_utf8(r.take(config_len)?)
            .map_err(|_| CheckpointError::Malformed("config is not UTF-8".into()))?;
        let config = ModelConfig::from_kv(text).map_err(|e| CheckpointError::Malformed(e.to_string()))?;
        let skeleton = build_model(&config, 0).map_err(|e| CheckpointError::Malformed(e.to_string()))?;

        let mut params = IndexMap::with_capacity(count);
        for _ in 0..count {
            let name_len = r.u16()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| CheckpointError::Malformed("tensor name is not UTF-8".into()))?
                .to_string();
            let rank = r.take(1)?[0] as usize;
            if !(1..=4).contains(&rank) {
                return Err(CheckpointError::Malformed(format!("{name}: rank {rank}")));
            }
            let mut dims = [1usize; 4];
            for d in dims.iter_mut().take(rank) {
                *d = r.u32()? as usize;
            }
            let expected = skeleton
                .params
                .get(&name)
                .ok_or_else(|| CheckpointError::Malformed(format!("unexpected tensor {name}")))?;
            if expected.dims() != dims {
                return Err(CheckpointError::Malformed(format!(
                    "{name}: dims {dims:?}, config implies {:?}",
                    expected.dims()
                )));
            }
            let payload = r.take(4 * expected.len())?;
            let data = payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4-byte chunk")))
                .collect();
            let t = Tensor::from_vec(dims, data).map_err(|e| CheckpointError::Malformed(e.to_string()))?;
            if params.insert(name.clone(), t).is_some() {
                return Err(CheckpointError::Malformed(format!("duplicate tensor {name}")));
            }
        }
        if r.pos != bytes.len() {
            return Err(CheckpointError::Malformed(format!(
                "{} trailing bytes",
                bytes.len() - r.pos
            )));
        }
        if let Some(missing) = skeleton.params.keys().find(|k| !params.contains_key(*k)) {
            return Err(CheckpointError::Malformed(format!("missing tensor {missing}")));
        }
        // creation order, whatever order the file used
        let params = skeleton
            .params
            .keys()
            .map(|k| (k.clone(), params.swap_remove(k).expect("presence checked")))
            .collect();
        Ok(Checkpoint {
            model: Model { config, params },
        })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(CheckpointError::Truncated {
                offset: self.pos,
                needed: n,
                len: self.bytes.len(),
            });
        };
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u16(&mut self) -> Result<u16, CheckpointError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

pub fn save_checkpoint(ck: &Checkpoint, path: &Path) -> Result<()> {
    fs::write(path, ck.to_bytes()).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(Checkpoint::from_bytes(&bytes)?)
}
