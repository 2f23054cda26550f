//! Named f64 tensors in a little-endian binary file.
//!
//! ```text
//! "DFRT"  u32 version  u32 entry_count
//! per entry:
//!   u32 name_len  name (UTF-8)  u32 rank  u64 dims[rank]  f64 payload[Π dims]
//! ```

use std::collections::HashSet;
use std::path::Path;

use crate::error::{Error, Result};

pub const MAGIC: [u8; 4] = *b"DFRT";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub dims: Vec<u64>,
    /// Row-major.
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(name: impl Into<String>, dims: Vec<u64>, data: Vec<f64>) -> Result<Self> {
        let name = name.into();
        let n = element_count(&dims)
            .ok_or_else(|| Error::Argument(format!("dims of `{name}` overflow")))?;
        if n != data.len() as u64 {
            return Err(Error::shape("tensor", n, data.len()));
        }
        Ok(Self { name, dims, data })
    }

    pub fn vector(name: impl Into<String>, data: Vec<f64>) -> Self {
        Self {
            name: name.into(),
            dims: vec![data.len() as u64],
            data,
        }
    }
}

fn element_count(dims: &[u64]) -> Option<u64> {
    dims.iter().try_fold(1u64, |acc, &d| acc.checked_mul(d))
}

pub fn encode(entries: &[Tensor]) -> Result<Vec<u8>> {
    let mut seen = HashSet::new();
    for t in entries {
        if !seen.insert(t.name.as_str()) {
            return Err(Error::Argument(format!("duplicate tensor name `{}`", t.name)));
        }
        if element_count(&t.dims) != Some(t.data.len() as u64) {
            return Err(Error::shape("tensor", format!("{:?}", t.dims), t.data.len()));
        }
    }
    let mut out = Vec::new();
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&len_u32(entries.len())?.to_le_bytes());
    for t in entries {
        out.extend_from_slice(&len_u32(t.name.len())?.to_le_bytes());
        out.extend_from_slice(t.name.as_bytes());
        out.extend_from_slice(&len_u32(t.dims.len())?.to_le_bytes());
        for d in &t.dims {
            out.extend_from_slice(&d.to_le_bytes());
        }
        for v in &t.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

fn len_u32(n: usize) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::Argument(format!("length {n} does not fit in u32")))
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
            None => Err(self.error(format!(
                "truncated {what}: need {n} bytes, {} left",
                self.bytes.len() - self.pos
            ))),
        }
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn error(&self, reason: String) -> Error {
        Error::Format {
            offset: self.pos as u64,
            reason,
        }
    }
}

pub fn decode(bytes: &[u8]) -> Result<Vec<Tensor>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::Format {
            offset: 0,
            reason: "bad magic, expected DFRT".into(),
        });
    }
    let version_at = r.pos as u64;
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::Format {
            offset: version_at,
            reason: format!("unsupported version {version}"),
        });
    }
    let count = r.u32("entry count")?;
    let mut seen = HashSet::new();
    let mut entries = Vec::new();
    for _ in 0..count {
        let name_len = r.u32("name length")? as usize;
        let name_at = r.pos as u64;
        let name = std::str::from_utf8(r.take(name_len, "name")?)
            .map_err(|e| Error::Format {
                offset: name_at,
                reason: format!("name is not UTF-8: {e}"),
            })?
            .to_owned();
        if !seen.insert(name.clone()) {
            return Err(Error::Format {
                offset: name_at,
                reason: format!("duplicate tensor name `{name}`"),
            });
        }
        let rank = r.u32("rank")?;
        let mut dims = Vec::new();
        for _ in 0..rank {
            dims.push(r.u64("dimension")?);
        }
        let n = element_count(&dims)
            .and_then(|n| usize::try_from(n).ok())
            .filter(|n| n.checked_mul(8).is_some())
            .ok_or_else(|| r.error(format!("payload size of `{name}` overflows")))?;
        let payload = r.take(n * 8, "payload")?;
        let data = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        entries.push(Tensor { name, dims, data });
    }
    if r.pos != bytes.len() {
        return Err(r.error(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(entries)
}

pub fn save_container(path: &Path, entries: &[Tensor]) -> Result<()> {
    let bytes = encode(entries)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_container(path: &Path) -> Result<Vec<Tensor>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

/// Looks up an entry by name.
pub fn find<'a>(entries: &'a [Tensor], name: &str) -> Result<&'a Tensor> {
    entries
        .iter()
        .find(|t| t.name == name)
        .ok_or_else(|| Error::Argument(format!("container has no tensor `{name}`")))
}
