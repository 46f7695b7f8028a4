//! Binary checkpoint format.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic    8 bytes  "SPTSEG1\0"
//! version  u32
//! config   u32 length + UTF-8 TOML
//! count    u32
//! count × { u32 name length, name, u8 dtype (0 = f32, 1 = f64),
//!           u32 rank, rank × u64 extents, row-major payload }
//! crc      u32, CRC-32 of every preceding byte
//! ```
//!
//! Tensors named `backbone.*` or `class.*` load as frozen, all others as
//! trainable.

use crate::config::{CheckpointDtype, Config};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;
use std::path::Path;

pub const MAGIC: &[u8; 8] = b"SPTSEG1\0";
pub const VERSION: u32 = 1;

const DTYPE_F32: u8 = 0;
const DTYPE_F64: u8 = 1;

pub fn is_frozen_name(name: &str) -> bool {
    name.starts_with("backbone.") || name.starts_with("class.")
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

/// Serializes every tensor in `params` together with the config snapshot.
pub fn save_checkpoint(params: &ParamStore, cfg: &Config, dtype: CheckpointDtype) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, VERSION);
    let toml = cfg.to_toml();
    put_u32(&mut out, toml.len() as u32);
    out.extend_from_slice(toml.as_bytes());
    put_u32(&mut out, params.len() as u32);
    for (name, p) in params.iter() {
        put_u32(&mut out, name.len() as u32);
        out.extend_from_slice(name.as_bytes());
        let t = &p.tensor;
        out.push(match dtype {
            CheckpointDtype::F32 => DTYPE_F32,
            CheckpointDtype::F64 => DTYPE_F64,
        });
        put_u32(&mut out, t.rank() as u32);
        for &e in t.shape() {
            out.extend_from_slice(&(e as u64).to_le_bytes());
        }
        match dtype {
            CheckpointDtype::F32 => t.data().iter().for_each(|&v| out.extend_from_slice(&(v as f32).to_le_bytes())),
            CheckpointDtype::F64 => out.extend_from_slice(&t.to_le_bytes()),
        }
    }
    let crc = crc32fast::hash(&out);
    put_u32(&mut out, crc);
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::Checkpoint(format!("truncated file: {what} needs {n} bytes at offset {}", self.pos))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

/// Parses and validates checkpoint bytes.
pub fn load_checkpoint(bytes: &[u8]) -> Result<(ParamStore, Config)> {
    if bytes.len() < MAGIC.len() + 8 {
        return Err(Error::Checkpoint(format!("truncated file: {} bytes", bytes.len())));
    }
    if &bytes[..8] != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().unwrap());
    let computed = crc32fast::hash(body);
    if stored != computed {
        return Err(Error::Checkpoint(format!(
            "CRC mismatch: stored {stored:#010x}, computed {computed:#010x}"
        )));
    }
    let mut r = Reader { bytes: body, pos: 8 };
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}, expected {VERSION}")));
    }
    let clen = r.u32("config length")? as usize;
    let ctext = std::str::from_utf8(r.take(clen, "config")?)
        .map_err(|_| Error::Checkpoint("config snapshot is not UTF-8".into()))?;
    let cfg = Config::from_toml(ctext).map_err(|e| Error::Checkpoint(format!("config snapshot: {e}")))?;
    let count = r.u32("tensor count")?;
    let mut params = ParamStore::new();
    for _ in 0..count {
        let nlen = r.u32("name length")? as usize;
        let name = std::str::from_utf8(r.take(nlen, "name")?)
            .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?
            .to_string();
        let dtype = r.take(1, "dtype")?[0];
        let width = match dtype {
            DTYPE_F32 => 4,
            DTYPE_F64 => 8,
            t => return Err(Error::Checkpoint(format!("unknown dtype tag {t} for `{name}`"))),
        };
        let rank = r.u32("rank")? as usize;
        let mut shape = Vec::with_capacity(rank.min(16));
        for _ in 0..rank {
            shape.push(r.u64("extent")? as usize);
        }
        let len = shape
            .iter()
            .try_fold(1usize, |a, &e| a.checked_mul(e))
            .and_then(|n| n.checked_mul(width))
            .ok_or_else(|| Error::Checkpoint(format!("extents of `{name}` overflow")))?;
        let payload = r.take(len, "payload")?;
        let data: Vec<f64> = if dtype == DTYPE_F32 {
            payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64).collect()
        } else {
            payload.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect()
        };
        let t = Tensor::new(&shape, data).map_err(|e| Error::Checkpoint(format!("`{name}`: {e}")))?;
        let frozen = is_frozen_name(&name);
        params.insert(name, t, !frozen);
    }
    if r.pos != body.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes after tensor table", body.len() - r.pos)));
    }
    Ok((params, cfg))
}

pub fn write_checkpoint(path: &Path, params: &ParamStore, cfg: &Config, dtype: CheckpointDtype) -> Result<()> {
    std::fs::write(path, save_checkpoint(params, cfg, dtype)).map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint(path: &Path) -> Result<(ParamStore, Config)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    load_checkpoint(&bytes)
}
