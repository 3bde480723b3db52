//! Binary parameter checkpoints.
//!
//! Layout (little-endian): magic `STGI`, format version `u16`, tensor count
//! `u32`, then per tensor: name length `u32`, UTF-8 name, rank `u32`, each
//! dimension `u32`, and the `f64` payload in row-major order.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numkit::{ParameterStore, Tensor};

pub const MAGIC: &[u8; 4] = b"STGI";
pub const VERSION: u16 = 1;

pub fn to_bytes(store: &ParameterStore) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for p in store.iter() {
        out.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
        out.extend_from_slice(p.name.as_bytes());
        out.extend_from_slice(&(p.value.rank() as u32).to_le_bytes());
        for &d in p.value.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in p.value.data() {
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
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::Format(format!("checkpoint truncated at byte {}", self.pos))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn from_bytes(bytes: &[u8]) -> Result<ParameterStore> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Format("not a parameter checkpoint (bad magic)".into()));
    }
    let version = r.u16()?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let count = r.u32()?;
    let mut store = ParameterStore::new();
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|e| Error::Format(format!("tensor name is not UTF-8: {e}")))?
            .to_string();
        let rank = r.u32()? as usize;
        let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
        if store.find(&name).is_some() {
            return Err(Error::Format(format!("duplicate tensor {name:?}")));
        }
        store.add(name, Tensor::new(shape, data)?);
    }
    if r.pos != bytes.len() {
        return Err(Error::Format(format!(
            "{} trailing bytes after checkpoint",
            bytes.len() - r.pos
        )));
    }
    Ok(store)
}

pub fn save(store: &ParameterStore, path: &Path) -> Result<()> {
    fs::write(path, to_bytes(store)).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<ParameterStore> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}
