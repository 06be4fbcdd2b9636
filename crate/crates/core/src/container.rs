//! Flat binary container shared by checkpoints (`XDWT`) and dataset caches (`XDAT`).
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic          4 bytes
//! version        u32
//! tag            u32
//! header_len     u32
//! header         header_len x i32
//! record_count   u32
//! record_count x {
//!     name_len   u32
//!     name       name_len bytes, UTF-8
//!     rank       u32
//!     dims       rank x u32
//!     data       prod(dims) x f32
//! }
//! ```

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Container {
    pub magic: [u8; 4],
    pub version: u32,
    pub tag: u32,
    pub header: Vec<i32>,
    pub records: Vec<(String, Tensor<f32>)>,
}

impl Container {
    pub fn new(magic: [u8; 4], tag: u32, header: Vec<i32>) -> Self {
        Container { magic, version: FORMAT_VERSION, tag, header, records: Vec::new() }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let payload: usize = self.records.iter().map(|(n, t)| 12 + n.len() + 4 * (t.shape().len() + t.numel())).sum();
        let mut out = Vec::with_capacity(20 + 4 * self.header.len() + payload);
        out.extend_from_slice(&self.magic);
        out.extend_from_slice(&self.version.to_le_bytes());
        out.extend_from_slice(&self.tag.to_le_bytes());
        out.extend_from_slice(&(self.header.len() as u32).to_le_bytes());
        for v in &self.header {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&(self.records.len() as u32).to_le_bytes());
        for (name, t) in &self.records {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], magic: [u8; 4]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let found: [u8; 4] = r.take(4)?.try_into().expect("4 bytes");
        if found != magic {
            return Err(r.err(format!(
                "bad magic {:?}, expected {:?}",
                String::from_utf8_lossy(&found),
                String::from_utf8_lossy(&magic)
            )));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(r.err(format!("unsupported version {version}")));
        }
        let tag = r.u32()?;
        let header_len = r.u32()? as usize;
        let header = (0..header_len).map(|_| r.u32().map(|v| v as i32)).collect::<Result<Vec<_>>>()?;
        let count = r.u32()? as usize;
        let mut records = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec()).map_err(|e| r.err(e.to_string()))?;
            let rank = r.u32()? as usize;
            let dims = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let numel =
                dims.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| r.err("dims overflow".into()))?;
            let raw = r.take(numel.checked_mul(4).ok_or_else(|| r.err("dims overflow".into()))?)?;
            let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
            let tensor = Tensor::new(dims, data).map_err(|e| r.err(format!("record {name}: {e}")))?;
            records.push((name, tensor));
        }
        if r.pos != bytes.len() {
            return Err(r.err(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Container { magic, version, tag, header, records })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path, magic: [u8; 4]) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, magic)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn err(&self, detail: String) -> Error {
        Error::Format { what: "container", detail: format!("at byte {}: {detail}", self.pos) }
    }

    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.err(format!("truncated, wanted {n} more bytes")));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}
