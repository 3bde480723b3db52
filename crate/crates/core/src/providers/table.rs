//! Binary embedding tables.
//!
//! Layout, little-endian throughout:
//!
//! ```text
//! b"STGE" | version: u16 | modality: u8 | dim: u32 | count: u32
//! count x ( key_len: u16 | key: utf-8 | dim x f32 )
//! ```
//!
//! Entries are written in key order so re-exporting a table is
//! byte-identical. Values are widened to `f64` on load.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const TABLE_MAGIC: &[u8; 4] = b"STGE";
pub const TABLE_VERSION: u16 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Text,
    Video,
}

impl Modality {
    pub fn tag(self) -> u8 {
        match self {
            Modality::Text => 0,
            Modality::Video => 1,
        }
    }

    pub fn from_tag(tag: u8) -> Result<Self> {
        match tag {
            0 => Ok(Modality::Text),
            1 => Ok(Modality::Video),
            other => Err(Error::Format(format!("unknown modality tag {other}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    modality: Modality,
    dim: usize,
    entries: BTreeMap<String, Vec<f64>>,
}

impl EmbeddingTable {
    pub fn new(modality: Modality, dim: usize) -> Result<Self> {
        if dim == 0 || dim > u32::MAX as usize {
            return Err(Error::Config(format!("embedding dim {dim} out of range")));
        }
        Ok(EmbeddingTable {
            modality,
            dim,
            entries: BTreeMap::new(),
        })
    }

    pub fn modality(&self) -> Modality {
        self.modality
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn insert(&mut self, key: impl Into<String>, vector: Vec<f64>) -> Result<()> {
        let key = key.into();
        if key.len() > u16::MAX as usize {
            return Err(Error::Format(format!("key of {} bytes is too long", key.len())));
        }
        if vector.len() != self.dim {
            return Err(Error::dim("embedding insert", &[vector.len()], &[self.dim]));
        }
        if vector.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("embedding insert"));
        }
        self.entries.insert(key, vector);
        Ok(())
    }

    pub fn get(&self, key: &str) -> Result<&[f64]> {
        self.entries.get(key).map(Vec::as_slice).ok_or_else(|| Error::MissingKey {
            key: key.to_string(),
            known: self.entries.keys().cloned().collect(),
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(15 + self.entries.len() * (8 + 4 * self.dim));
        out.extend_from_slice(TABLE_MAGIC);
        out.extend_from_slice(&TABLE_VERSION.to_le_bytes());
        out.push(self.modality.tag());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (key, vector) in &self.entries {
            out.extend_from_slice(&(key.len() as u16).to_le_bytes());
            out.extend_from_slice(key.as_bytes());
            for v in vector {
                out.extend_from_slice(&(*v as f32).to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Cursor { bytes, pos: 0 };
        if r.take(4)? != TABLE_MAGIC {
            return Err(Error::Format("not an embedding table (bad magic)".into()));
        }
        let version = u16::from_le_bytes(r.array()?);
        if version != TABLE_VERSION {
            return Err(Error::Format(format!("unsupported embedding table version {version}")));
        }
        let modality = Modality::from_tag(r.take(1)?[0])?;
        let dim = u32::from_le_bytes(r.array()?) as usize;
        let count = u32::from_le_bytes(r.array()?) as usize;
        let mut table = EmbeddingTable::new(modality, dim)?;
        for _ in 0..count {
            let key_len = u16::from_le_bytes(r.array()?) as usize;
            let key = std::str::from_utf8(r.take(key_len)?)
                .map_err(|e| Error::Format(format!("embedding key is not utf-8: {e}")))?
                .to_string();
            let payload = r.take(dim * 4)?;
            let vector = payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
                .collect();
            if table.entries.contains_key(&key) {
                return Err(Error::Format(format!("duplicate embedding key {key:?}")));
            }
            table.insert(key, vector)?;
        }
        if r.pos != bytes.len() {
            return Err(Error::Format(format!("{} trailing bytes after embedding table", bytes.len() - r.pos)));
        }
        Ok(table)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        EmbeddingTable::from_bytes(&bytes)
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::Format(format!("embedding table truncated at byte {}", self.pos))
        })?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }
}
