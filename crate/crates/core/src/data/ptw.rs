//! Portable tensor weight (PTW) files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "PTWF"                      magic
//! u16                         version (= 1)
//! u32                         tensor count
//! per tensor:
//!   u16 + bytes               UTF-8 name
//!   u8                        dtype (0 = f32)
//!   u8                        ndim
//!   ndim × u32                dims
//!   product(dims) × f32       payload
//! u32                         metadata count
//! per entry:
//!   u16 + bytes               key
//!   u32 + bytes               value
//! u32                         CRC-32 (IEEE) of every preceding byte
//! ```
//!
//! Serialization is canonical: equal contents always produce equal bytes.

use std::path::Path;

use thiserror::Error;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"PTWF";
pub const VERSION: u16 = 1;
const DTYPE_F32: u8 = 0;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PtwError {
    #[error("bad magic bytes {0:02x?}")]
    BadMagic(Vec<u8>),
    #[error("unsupported version {0}")]
    UnsupportedVersion(u16),
    #[error("truncated while reading {0}")]
    Truncated(&'static str),
    #[error("checksum mismatch: stored {stored:08x}, computed {computed:08x}")]
    ChecksumMismatch { stored: u32, computed: u32 },
    #[error("unsupported dtype {dtype} for tensor `{name}`")]
    UnsupportedDtype { name: String, dtype: u8 },
    #[error("duplicate tensor name `{0}`")]
    DuplicateName(String),
    #[error("invalid UTF-8 in {0}")]
    InvalidUtf8(&'static str),
    #[error("{0} trailing bytes after checksum")]
    TrailingBytes(usize),
    #[error("tensor `{0}` is too large for the format")]
    TooLarge(String),
}

#[derive(Clone, Debug, PartialEq)]
pub struct PtwTensor {
    pub name: String,
    pub dims: Vec<usize>,
    pub values: Vec<f32>,
}

impl PtwTensor {
    pub fn to_tensor(&self) -> Result<Tensor> {
        Tensor::new(&self.dims, self.values.clone())
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct PtwFile {
    pub tensors: Vec<PtwTensor>,
    pub metadata: Vec<(String, String)>,
}

impl PtwFile {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push_tensor(&mut self, name: impl Into<String>, t: &Tensor) -> Result<()> {
        let name = name.into();
        if self.tensor(&name).is_some() {
            return Err(PtwError::DuplicateName(name).into());
        }
        self.tensors.push(PtwTensor {
            name,
            dims: t.dims().to_vec(),
            values: t.data().to_vec(),
        });
        Ok(())
    }

    pub fn set_meta(&mut self, key: impl Into<String>, value: impl Into<String>) {
        let key = key.into();
        let value = value.into();
        match self.metadata.iter_mut().find(|(k, _)| *k == key) {
            Some(entry) => entry.1 = value,
            None => self.metadata.push((key, value)),
        }
    }

    pub fn tensor(&self, name: &str) -> Option<&PtwTensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn meta(&self, key: &str) -> Option<&str> {
        self.metadata.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>, PtwError> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&len_u32(self.tensors.len(), "tensor count")?.to_le_bytes());
        let mut seen = std::collections::HashSet::new();
        for t in &self.tensors {
            if !seen.insert(t.name.as_str()) {
                return Err(PtwError::DuplicateName(t.name.clone()));
            }
            let name_len = u16::try_from(t.name.len()).map_err(|_| PtwError::TooLarge(t.name.clone()))?;
            let ndim = u8::try_from(t.dims.len()).map_err(|_| PtwError::TooLarge(t.name.clone()))?;
            if t.dims.iter().product::<usize>() != t.values.len() {
                return Err(PtwError::TooLarge(t.name.clone()));
            }
            out.extend_from_slice(&name_len.to_le_bytes());
            out.extend_from_slice(t.name.as_bytes());
            out.push(DTYPE_F32);
            out.push(ndim);
            for &d in &t.dims {
                let d = u32::try_from(d).map_err(|_| PtwError::TooLarge(t.name.clone()))?;
                out.extend_from_slice(&d.to_le_bytes());
            }
            for v in &t.values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out.extend_from_slice(&len_u32(self.metadata.len(), "metadata count")?.to_le_bytes());
        for (k, v) in &self.metadata {
            let klen = u16::try_from(k.len()).map_err(|_| PtwError::TooLarge(k.clone()))?;
            out.extend_from_slice(&klen.to_le_bytes());
            out.extend_from_slice(k.as_bytes());
            out.extend_from_slice(&len_u32(v.len(), "metadata value")?.to_le_bytes());
            out.extend_from_slice(v.as_bytes());
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, PtwError> {
        let mut cur = Cursor { bytes, pos: 0 };
        let magic = cur.take(4, "magic")?;
        if magic != MAGIC {
            return Err(PtwError::BadMagic(magic.to_vec()));
        }
        let version = cur.u16("version")?;
        if version != VERSION {
            return Err(PtwError::UnsupportedVersion(version));
        }
        let count = cur.u32("tensor count")? as usize;
        let mut file = PtwFile::new();
        let mut seen = std::collections::HashSet::new();
        for _ in 0..count {
            let name_len = cur.u16("tensor name length")? as usize;
            let name = cur.string(name_len, "tensor name")?;
            let dtype = cur.u8("dtype")?;
            if dtype != DTYPE_F32 {
                return Err(PtwError::UnsupportedDtype { name, dtype });
            }
            let ndim = cur.u8("ndim")? as usize;
            let mut dims = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                dims.push(cur.u32("dims")? as usize);
            }
            let len = dims
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .and_then(|n| n.checked_mul(4))
                .ok_or_else(|| PtwError::TooLarge(name.clone()))?;
            let values = cur
                .take(len, "payload")?
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            if !seen.insert(name.clone()) {
                return Err(PtwError::DuplicateName(name));
            }
            file.tensors.push(PtwTensor { name, dims, values });
        }
        let meta_count = cur.u32("metadata count")? as usize;
        for _ in 0..meta_count {
            let klen = cur.u16("metadata key length")? as usize;
            let key = cur.string(klen, "metadata key")?;
            let vlen = cur.u32("metadata value length")? as usize;
            let value = cur.string(vlen, "metadata value")?;
            file.metadata.push((key, value));
        }
        let body_end = cur.pos;
        let stored = cur.u32("checksum")?;
        let computed = crc32fast::hash(&bytes[..body_end]);
        if stored != computed {
            return Err(PtwError::ChecksumMismatch { stored, computed });
        }
        if cur.pos != bytes.len() {
            return Err(PtwError::TrailingBytes(bytes.len() - cur.pos));
        }
        Ok(file)
    }
}

fn len_u32(n: usize, what: &'static str) -> Result<u32, PtwError> {
    u32::try_from(n).map_err(|_| PtwError::TooLarge(what.to_string()))
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8], PtwError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or(PtwError::Truncated(what))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self, what: &'static str) -> Result<u8, PtwError> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &'static str) -> Result<u16, PtwError> {
        let b = self.take(2, what)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self, what: &'static str) -> Result<u32, PtwError> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn string(&mut self, n: usize, what: &'static str) -> Result<String, PtwError> {
        String::from_utf8(self.take(n, what)?.to_vec()).map_err(|_| PtwError::InvalidUtf8(what))
    }
}

pub fn write_ptw(file: &PtwFile, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = file.to_bytes()?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_ptw(path: impl AsRef<Path>) -> Result<PtwFile> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(PtwFile::from_bytes(&bytes)?)
}
