//! Versioned container of named float32 arrays.
//!
//! Layout (all integers little-endian `u32`):
//!
//! ```text
//! magic "KNCK" | version | metadata_len | metadata (UTF-8)
//! entry_count | { name_len | name | ndim | dims.. | f32 payload }*
//! sha256 of every preceding byte (32 bytes)
//! ```
//!
//! The metadata section is free-form text owned by the caller (models store
//! their configuration there).

use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"KNCK";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub metadata: String,
    pub entries: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn new(metadata: impl Into<String>) -> Self {
        Self {
            metadata: metadata.into(),
            entries: Vec::new(),
        }
    }

    /// Appends every parameter of `store`, prefixing names with `prefix`.
    pub fn push_store(&mut self, prefix: &str, store: &ParamStore) {
        for (name, t) in store.named_tensors() {
            self.entries.push((format!("{prefix}{name}"), t));
        }
    }

    /// Loads every parameter of `store` from entries named `prefix + name`.
    pub fn load_store(&self, prefix: &str, store: &mut ParamStore) -> Result<()> {
        let scoped: Vec<(String, Tensor)> = self
            .entries
            .iter()
            .filter_map(|(n, t)| n.strip_prefix(prefix).map(|s| (s.to_string(), t.clone())))
            .collect();
        store.assign_named(&scoped)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, VERSION);
        put_u32(&mut out, self.metadata.len() as u32);
        out.extend_from_slice(self.metadata.as_bytes());
        put_u32(&mut out, self.entries.len() as u32);
        for (name, t) in &self.entries {
            put_u32(&mut out, name.len() as u32);
            out.extend_from_slice(name.as_bytes());
            put_u32(&mut out, t.shape().len() as u32);
            for &d in t.shape() {
                put_u32(&mut out, d as u32);
            }
            for &v in t.data() {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 + 4 + 32 {
            return Err(bad(0, "file too short for a checkpoint"));
        }
        let body = &bytes[..bytes.len() - 32];
        let digest = Sha256::digest(body);
        if digest.as_slice() != &bytes[bytes.len() - 32..] {
            return Err(bad(body.len(), "checksum mismatch"));
        }
        let mut r = Reader { buf: body, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(bad(0, "bad magic"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(bad(4, &format!("unsupported version {version}")));
        }
        let meta_len = r.u32()? as usize;
        let meta_at = r.pos;
        let metadata = std::str::from_utf8(r.take(meta_len)?)
            .map_err(|_| bad(meta_at, "metadata is not UTF-8"))?
            .to_string();
        let count = r.u32()? as usize;
        let mut entries = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let at = r.pos;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| bad(at, "entry name is not UTF-8"))?
                .to_string();
            let ndim = r.u32()? as usize;
            let mut shape = Vec::with_capacity(ndim.min(8));
            for _ in 0..ndim {
                shape.push(r.u32()? as usize);
            }
            let n: usize = shape.iter().product();
            let at = r.pos;
            let raw = r.take(n.checked_mul(4).ok_or_else(|| bad(at, "entry too large"))?)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
                .collect();
            entries.push((name, Tensor::new(&shape, data)?));
        }
        if r.pos != body.len() {
            return Err(bad(r.pos, "trailing bytes after last entry"));
        }
        Ok(Self { metadata, entries })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    /// Hex SHA-256 of the serialized form.
    pub fn checksum(&self) -> String {
        let bytes = self.to_bytes();
        hex(&bytes[bytes.len() - 32..])
    }
}

/// Lowercase hex encoding.
pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Hex SHA-256 of arbitrary bytes.
pub fn sha256_hex(bytes: &[u8]) -> String {
    hex(&Sha256::digest(bytes))
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn bad(offset: usize, message: &str) -> Error {
    Error::Checkpoint {
        offset,
        message: message.to_string(),
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(bad(self.pos, "unexpected end of data"));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}
