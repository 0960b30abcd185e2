//! Binary tensor checkpoints.
//!
//! Layout (all little-endian): magic `RFNT`, `u32` version, `u32` tensor
//! count, then per tensor `u32` name length, UTF-8 name, `u32` rank, `u64`
//! dims, `u64` byte offset into the data section; then the data section of
//! `f64` values. Momentum buffers are stored as extra tensors named
//! `{name}@momentum`.

use std::fs;
use std::path::Path;

use super::ParamStore;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"RFNT";
pub const VERSION: u32 = 1;
pub const MOMENTUM_SUFFIX: &str = "@momentum";

#[derive(Debug, Clone, PartialEq)]
pub struct StoredTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub value: Vec<f64>,
}

/// Flattens named stores into one tensor list, prefixing each tensor with
/// `{section}/`.
pub fn collect(sections: &[(&str, &ParamStore)]) -> Vec<StoredTensor> {
    let mut out = Vec::new();
    for (section, store) in sections {
        for t in store.tensors() {
            let name = format!("{section}/{}", t.name);
            out.push(StoredTensor {
                name: format!("{name}{MOMENTUM_SUFFIX}"),
                shape: t.shape.clone(),
                value: t.momentum.clone(),
            });
            out.push(StoredTensor {
                name,
                shape: t.shape.clone(),
                value: t.value.clone(),
            });
        }
    }
    out
}

pub fn encode(tensors: &[StoredTensor]) -> Vec<u8> {
    let mut head = Vec::new();
    head.extend_from_slice(MAGIC);
    head.extend_from_slice(&VERSION.to_le_bytes());
    head.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    let mut data = Vec::new();
    for t in tensors {
        head.extend_from_slice(&(t.name.len() as u32).to_le_bytes());
        head.extend_from_slice(t.name.as_bytes());
        head.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
        for d in &t.shape {
            head.extend_from_slice(&(*d as u64).to_le_bytes());
        }
        head.extend_from_slice(&(data.len() as u64).to_le_bytes());
        for v in &t.value {
            data.extend_from_slice(&v.to_le_bytes());
        }
    }
    head.extend_from_slice(&data);
    head
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn decode(buf: &[u8]) -> Result<Vec<StoredTensor>> {
    let mut c = Cursor { buf, pos: 0 };
    if c.take(4)? != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = c.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "version {version}, expected {VERSION}"
        )));
    }
    let count = c.u32()? as usize;
    let mut table = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let len = c.u32()? as usize;
        let name = std::str::from_utf8(c.take(len)?)
            .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?
            .to_string();
        let rank = c.u32()? as usize;
        let shape = (0..rank)
            .map(|_| c.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let offset = c.u64()? as usize;
        table.push((name, shape, offset));
    }
    let data = &buf[c.pos..];
    table
        .into_iter()
        .map(|(name, shape, offset)| {
            let numel: usize = shape.iter().product();
            let bytes = offset
                .checked_add(numel * 8)
                .and_then(|end| data.get(offset..end))
                .ok_or_else(|| Error::Checkpoint(format!("tensor {name} out of bounds")))?;
            let value = bytes
                .chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
                .collect();
            Ok(StoredTensor { name, shape, value })
        })
        .collect()
}

pub fn save(path: &Path, sections: &[(&str, &ParamStore)]) -> Result<()> {
    fs::write(path, encode(&collect(sections))).map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn load(path: &Path) -> Result<Vec<StoredTensor>> {
    let buf = fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    decode(&buf)
}

/// Restores one section written by [`save`].
pub fn restore(store: &mut ParamStore, section: &str, tensors: &[StoredTensor]) -> Result<()> {
    store.load_from(&format!("{section}/"), tensors)
}
