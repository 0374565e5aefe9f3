//! Binary checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "UASR1"
//! u32 config length, config text (key=value lines)
//! u32 tensor count
//! per tensor: u32 name length, name, u32 rank, rank × u32 extents, values as f32
//! u32 CRC32 of every preceding byte
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelParams};
use crate::numerics::Tensor;

pub const MAGIC: &[u8; 5] = b"UASR1";

pub fn encode_checkpoint(params: &ModelParams, config: &ModelConfig) -> Vec<u8> {
    let mut out = Vec::with_capacity(64 + 4 * params.numel());
    out.extend_from_slice(MAGIC);
    let text = config.to_text();
    out.extend_from_slice(&(text.len() as u32).to_le_bytes());
    out.extend_from_slice(text.as_bytes());
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, t) in params.tensors() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &e in t.shape() {
            out.extend_from_slice(&(e as u32).to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, field: &'static str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Checkpoint {
                field,
                offset: self.pos,
                reason: format!("needs {n} bytes, {} left", self.bytes.len() - self.pos),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, field: &'static str) -> Result<usize> {
        let b = self.take(4, field)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }

    fn text(&mut self, field: &'static str) -> Result<&'a str> {
        let len = self.u32(field)?;
        let at = self.pos;
        std::str::from_utf8(self.take(len, field)?).map_err(|e| Error::Checkpoint {
            field,
            offset: at,
            reason: e.to_string(),
        })
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<(ModelParams, ModelConfig)> {
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        return Err(Error::Checkpoint {
            field: "magic",
            offset: 0,
            reason: "not a UASR1 checkpoint".into(),
        });
    }
    if bytes.len() < MAGIC.len() + 4 {
        return Err(Error::Checkpoint {
            field: "length",
            offset: bytes.len(),
            reason: "file too short for a checksum".into(),
        });
    }
    let body_len = bytes.len() - 4;
    let stored = u32::from_le_bytes(bytes[body_len..].try_into().expect("4 bytes"));
    let computed = crc32fast::hash(&bytes[..body_len]);
    if stored != computed {
        return Err(Error::Checkpoint {
            field: "checksum",
            offset: body_len,
            reason: format!("stored {stored:08x}, computed {computed:08x}"),
        });
    }

    let mut r = Reader {
        bytes: &bytes[..body_len],
        pos: MAGIC.len(),
    };
    let config_at = r.pos;
    let config = ModelConfig::from_text(r.text("config")?).map_err(|e| Error::Checkpoint {
        field: "config",
        offset: config_at,
        reason: e.to_string(),
    })?;
    let count = r.u32("tensor_count")?;
    let mut tensors = BTreeMap::new();
    for _ in 0..count {
        let name_at = r.pos;
        let name = r.text("name")?.to_string();
        let rank = r.u32("rank")?;
        let shape: Vec<usize> = (0..rank).map(|_| r.u32("extent")).collect::<Result<_>>()?;
        let numel: usize = shape.iter().product();
        let values_at = r.pos;
        let raw = r.take(numel * 4, "values")?;
        let data: Vec<f64> = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
            .collect();
        let t = Tensor::new(&shape, data).map_err(|e| Error::Checkpoint {
            field: "values",
            offset: values_at,
            reason: e.to_string(),
        })?;
        if tensors.insert(name.clone(), t).is_some() {
            return Err(Error::Checkpoint {
                field: "name",
                offset: name_at,
                reason: format!("duplicate tensor {name}"),
            });
        }
    }
    if r.pos != body_len {
        return Err(Error::Checkpoint {
            field: "trailing",
            offset: r.pos,
            reason: format!("{} unread bytes", body_len - r.pos),
        });
    }
    let params = ModelParams::from_map(tensors);
    params.check_against(&config).map_err(|e| Error::Checkpoint {
        field: "tensors",
        offset: config_at,
        reason: e.to_string(),
    })?;
    Ok((params, config))
}

pub fn checkpoint_save(params: &ModelParams, config: &ModelConfig, path: &Path) -> Result<()> {
    std::fs::write(path, encode_checkpoint(params, config))?;
    Ok(())
}

pub fn checkpoint_load(path: &Path) -> Result<(ModelParams, ModelConfig)> {
    decode_checkpoint(&std::fs::read(path)?)
}
