//! Binary checkpoint format, all integers little-endian:
//!
//! ```text
//! magic    4 bytes  "DPAN"
//! version  u16      1
//! count    u32      number of entries
//! entry*:
//!   name_len u32, name (UTF-8, name_len bytes)
//!   rank     u32, dims (rank x u32)
//!   values   f32 x product(dims)
//! ```
//!
//! Entries are written in parameter-name order.

use std::fs;
use std::path::Path;

use super::config::NetConfig;
use super::params::{validate_store, ParamStore};
use crate::error::{Error, Result};
use crate::tensor::{Shape4, Tensor};

pub const MAGIC: &[u8; 4] = b"DPAN";
pub const VERSION: u16 = 1;

pub fn encode(store: &ParamStore<f32>) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + store.num_scalars() * 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for (name, t) in store.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        let dims = t.shape().dims();
        out.extend_from_slice(&(dims.len() as u32).to_le_bytes());
        for d in dims {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Format(format!("truncated while reading {what} at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }
}

pub fn decode(bytes: &[u8]) -> Result<ParamStore<f32>> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::Format("bad magic, not a DPAN checkpoint".into()));
    }
    let version = u16::from_le_bytes(r.take(2, "version")?.try_into().expect("2 bytes"));
    if version != VERSION {
        return Err(Error::Format(format!(
            "unsupported version {version}, expected {VERSION}"
        )));
    }
    let count = r.u32("entry count")?;
    let mut store = ParamStore::new();
    for i in 0..count {
        let len = r.u32("name length")? as usize;
        let name = std::str::from_utf8(r.take(len, "name")?)
            .map_err(|_| Error::Format(format!("entry {i}: name is not UTF-8")))?
            .to_owned();
        let rank = r.u32("rank")? as usize;
        if rank == 0 || rank > 4 {
            return Err(Error::Format(format!("entry `{name}`: unsupported rank {rank}")));
        }
        let mut dims = [1usize; 4];
        for d in dims[4 - rank..].iter_mut() {
            *d = r.u32("dims")? as usize;
        }
        let shape = Shape4::from(dims);
        let raw = r.take(shape.numel() * 4, "values")?;
        let values = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        if store.insert(name.clone(), Tensor::from_vec(shape, values)?).is_some() {
            return Err(Error::Format(format!("duplicate entry `{name}`")));
        }
    }
    if r.pos != bytes.len() {
        return Err(Error::Format(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(store)
}

pub fn save(store: &ParamStore<f32>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode(store)).map_err(|e| Error::io(path, e))
}

/// Reads a checkpoint without checking it against a configuration.
pub fn load_unchecked(path: impl AsRef<Path>) -> Result<ParamStore<f32>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

/// Reads a checkpoint and validates names and shapes against `cfg`.
pub fn load(path: impl AsRef<Path>, cfg: &NetConfig) -> Result<ParamStore<f32>> {
    let store = load_unchecked(path)?;
    validate_store(cfg, &store)?;
    Ok(store)
}
