//! The `SKTF` binary tensor container shared by VGG weights, content-net
//! checkpoints and cached exemplar pyramids.
//!
//! Layout, all integers and floats little-endian:
//!
//! ```text
//! magic        4 bytes  "SKTF"
//! version      u32      1
//! norm_count   u32      number of input-normalization channels C
//! mean         C x f64
//! scale        C x f64
//! records      u32
//! per record:
//!   name_len   u32, then name_len bytes of UTF-8
//!   dtype      u8       1 = f64
//!   rank       u32
//!   dims       rank x u64
//!   payload    prod(dims) x f64
//! ```
//!
//! A network input channel is `scale[c] * (pixel - mean[c])` for pixels in `[0, 1]`.

use std::collections::HashSet;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

pub const MAGIC: &[u8; 4] = b"SKTF";
pub const VERSION: u32 = 1;
pub const DTYPE_F64: u8 = 1;

/// Per-channel pixel preprocessing recorded in the file header.
#[derive(Debug, Clone, PartialEq)]
pub struct Normalization {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

impl Normalization {
    pub fn identity(channels: usize) -> Self {
        Normalization {
            mean: vec![0.0; channels],
            scale: vec![1.0; channels],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: Vec<f64>,
}

impl Record {
    pub fn from_tensor(name: impl Into<String>, t: &Tensor) -> Self {
        let s = t.shape();
        Record {
            name: name.into(),
            dims: vec![s.n, s.c, s.h, s.w],
            data: t.data().to_vec(),
        }
    }

    pub fn vector(name: impl Into<String>, v: &[f64]) -> Self {
        Record {
            name: name.into(),
            dims: vec![v.len()],
            data: v.to_vec(),
        }
    }

    /// Interprets a rank-4 record as a tensor.
    pub fn to_tensor(&self) -> Result<Tensor> {
        match self.dims[..] {
            [n, c, h, w] => Tensor::from_vec(Shape::new(n, c, h, w), self.data.clone()),
            _ => Err(Error::shape(
                "Record::to_tensor",
                "rank 4",
                format!("{} has dims {:?}", self.name, self.dims),
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TensorFile {
    pub normalization: Normalization,
    pub records: Vec<Record>,
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        if self.buf.len() - self.pos < n {
            return Err(format!("truncated at byte {}", self.pos));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> std::result::Result<u8, String> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> std::result::Result<u64, String> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64s(&mut self, n: usize) -> std::result::Result<Vec<f64>, String> {
        let bytes = n
            .checked_mul(8)
            .ok_or_else(|| "payload size overflows".to_string())?;
        let raw = self.take(bytes)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

impl TensorFile {
    pub fn new(normalization: Normalization) -> Self {
        TensorFile {
            normalization,
            records: Vec::new(),
        }
    }

    pub fn push(&mut self, record: Record) {
        self.records.push(record);
    }

    pub fn get(&self, name: &str) -> Option<&Record> {
        self.records.iter().find(|r| r.name == name)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let norm = &self.normalization;
        out.extend_from_slice(&(norm.mean.len() as u32).to_le_bytes());
        for v in norm.mean.iter().chain(&norm.scale) {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&(self.records.len() as u32).to_le_bytes());
        for r in &self.records {
            out.extend_from_slice(&(r.name.len() as u32).to_le_bytes());
            out.extend_from_slice(r.name.as_bytes());
            out.push(DTYPE_F64);
            out.extend_from_slice(&(r.dims.len() as u32).to_le_bytes());
            for &d in &r.dims {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in &r.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(buf: &[u8]) -> std::result::Result<Self, String> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err("bad magic, expected SKTF".into());
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(format!("unsupported version {version}"));
        }
        let nc = r.u32()? as usize;
        let mean = r.f64s(nc)?;
        let scale = r.f64s(nc)?;
        let count = r.u32()? as usize;
        let mut records = Vec::with_capacity(count.min(1024));
        let mut names = HashSet::new();
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|e| format!("record name is not UTF-8: {e}"))?
                .to_string();
            if !names.insert(name.clone()) {
                return Err(format!("duplicate record {name:?}"));
            }
            let dtype = r.u8()?;
            if dtype != DTYPE_F64 {
                return Err(format!("record {name:?}: unsupported dtype tag {dtype}"));
            }
            let rank = r.u32()? as usize;
            let dims = (0..rank)
                .map(|_| r.u64().map(|d| d as usize))
                .collect::<std::result::Result<Vec<_>, _>>()?;
            let len = dims
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| format!("record {name:?}: dims overflow"))?;
            let data = r.f64s(len)?;
            records.push(Record { name, dims, data });
        }
        if r.pos != buf.len() {
            return Err(format!("{} trailing bytes", buf.len() - r.pos));
        }
        Ok(TensorFile {
            normalization: Normalization { mean, scale },
            records,
        })
    }

    pub fn read(path: &Path) -> Result<Self> {
        Ok(Self::read_with_hash(path)?.0)
    }

    /// Reads the file and returns it with the SHA-256 of its bytes.
    pub fn read_with_hash(path: &Path) -> Result<(Self, String)> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let file = Self::from_bytes(&bytes).map_err(|msg| Error::TensorFile {
            path: path.to_path_buf(),
            msg,
        })?;
        Ok((file, sha256_hex(&bytes)))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}
