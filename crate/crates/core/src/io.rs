//! On-disk formats: `RFM1` feature files, per-image annotation and proposal
//! JSON, and atomic file writes.
//!
//! Feature file layout (all integers little-endian):
//!
//! ```text
//! "RFM1" | p: u32 | q: u32 | d: u32 | id_len: u32 | id: [u8; id_len] | p*q*d f32
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::BoundingBox;
use crate::types::{FeatureMap, ImageAnnotation, ImageId};

pub const FEATURE_MAGIC: &[u8; 4] = b"RFM1";

/// Cursor over a byte slice that reports failures with their offset.
pub struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    pub fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    pub fn position(&self) -> usize {
        self.pos
    }

    pub fn error(&self, message: impl Into<String>) -> Error {
        Error::Parse { offset: self.pos as u64, message: message.into() }
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let remaining = self.bytes.len() - self.pos;
        if n > remaining {
            return Err(self.error(format!("truncated: expected {n} bytes, found {remaining}")));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    pub fn expect_magic(&mut self, magic: &[u8]) -> Result<()> {
        let at = self.pos;
        let got = self.take(magic.len())?;
        if got != magic {
            return Err(Error::Parse {
                offset: at as u64,
                message: format!(
                    "bad magic {:?}, expected {:?}",
                    String::from_utf8_lossy(got),
                    String::from_utf8_lossy(magic)
                ),
            });
        }
        Ok(())
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn u128(&mut self) -> Result<u128> {
        Ok(u128::from_le_bytes(self.take(16)?.try_into().unwrap()))
    }

    pub fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn string(&mut self) -> Result<String> {
        let len = self.u32()? as usize;
        let at = self.pos;
        let raw = self.take(len)?;
        String::from_utf8(raw.to_vec()).map_err(|e| Error::Parse {
            offset: at as u64,
            message: format!("invalid utf-8: {e}"),
        })
    }

    pub fn f32_vec(&mut self, n: usize) -> Result<Vec<f32>> {
        let len = n.checked_mul(4).ok_or_else(|| self.error("payload size overflows"))?;
        let raw = self.take(len)?;
        Ok(raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect())
    }

    pub fn f64_vec(&mut self, n: usize) -> Result<Vec<f64>> {
        let len = n.checked_mul(8).ok_or_else(|| self.error("payload size overflows"))?;
        let raw = self.take(len)?;
        Ok(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
    }

    pub fn expect_end(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(self.error(format!("{} trailing bytes", self.bytes.len() - self.pos)));
        }
        Ok(())
    }
}

pub(crate) fn put_string(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

/// Appends a named tensor: name, `u32` rank, `u32` dims, then little-endian
/// `f32` values.
pub(crate) fn put_tensor_f32(out: &mut Vec<u8>, name: &str, dims: &[usize], data: &[f64]) {
    put_tensor_header(out, name, dims, data.len());
    for v in data {
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
}

/// As [`put_tensor_f32`] but with `f64` values.
pub(crate) fn put_tensor_f64(out: &mut Vec<u8>, name: &str, dims: &[usize], data: &[f64]) {
    put_tensor_header(out, name, dims, data.len());
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn put_tensor_header(out: &mut Vec<u8>, name: &str, dims: &[usize], len: usize) {
    debug_assert_eq!(dims.iter().product::<usize>(), len);
    put_string(out, name);
    out.extend_from_slice(&(dims.len() as u32).to_le_bytes());
    for d in dims {
        out.extend_from_slice(&(*d as u32).to_le_bytes());
    }
}

impl ByteReader<'_> {
    fn tensor_header(&mut self, name: &str) -> Result<(Vec<usize>, usize)> {
        let got = self.string()?;
        if got != name {
            return Err(self.error(format!("expected tensor {name:?}, found {got:?}")));
        }
        let rank = self.u32()? as usize;
        if rank > 8 {
            return Err(self.error(format!("tensor {name} has implausible rank {rank}")));
        }
        let dims: Vec<usize> = (0..rank).map(|_| self.u32().map(|d| d as usize)).collect::<Result<_>>()?;
        let len = dims
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| self.error("tensor size overflows"))?;
        Ok((dims, len))
    }

    pub(crate) fn tensor_f32(&mut self, name: &str) -> Result<(Vec<usize>, Vec<f64>)> {
        let (dims, len) = self.tensor_header(name)?;
        let data = self.f32_vec(len)?.into_iter().map(f64::from).collect();
        Ok((dims, data))
    }

    pub(crate) fn tensor_f64(&mut self, name: &str) -> Result<(Vec<usize>, Vec<f64>)> {
        let (dims, len) = self.tensor_header(name)?;
        Ok((dims, self.f64_vec(len)?))
    }
}

/// Writes through a temporary file in the destination directory, then renames.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    fs::create_dir_all(dir)?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}

pub fn write_json_atomic<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    write_atomic(path, &bytes)
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = fs::read(path)?;
    serde_json::from_slice(&bytes).map_err(|e| Error::Parse {
        offset: byte_offset(&bytes, e.line(), e.column()),
        message: format!("{}: {e}", path.display()),
    })
}

fn byte_offset(bytes: &[u8], line: usize, column: usize) -> u64 {
    if line == 0 {
        return 0;
    }
    let mut offset = 0;
    for (i, l) in bytes.split(|&b| b == b'\n').enumerate() {
        if i + 1 == line {
            return (offset + column.saturating_sub(1)) as u64;
        }
        offset += l.len() + 1;
    }
    bytes.len() as u64
}

pub fn encode_feature(fmap: &FeatureMap) -> Vec<u8> {
    let id = fmap.image_id.as_str();
    let mut out = Vec::with_capacity(20 + id.len() + fmap.values().len() * 4);
    out.extend_from_slice(FEATURE_MAGIC);
    for v in [fmap.grid_h(), fmap.grid_w(), fmap.channels()] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    put_string(&mut out, id);
    for v in fmap.values() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_feature(bytes: &[u8]) -> Result<FeatureMap> {
    let mut r = ByteReader::new(bytes);
    r.expect_magic(FEATURE_MAGIC)?;
    let p = r.u32()? as usize;
    let q = r.u32()? as usize;
    let d = r.u32()? as usize;
    if p == 0 || q == 0 || d == 0 {
        return Err(r.error(format!("zero dimension in header {p}x{q}x{d}")));
    }
    let id = r.string()?;
    let n = p
        .checked_mul(q)
        .and_then(|v| v.checked_mul(d))
        .ok_or_else(|| r.error("payload size overflows"))?;
    let at = r.position();
    let values = r.f32_vec(n)?;
    r.expect_end()?;
    FeatureMap::new(ImageId(id), p, q, d, values).map_err(|e| Error::Parse {
        offset: at as u64,
        message: e.to_string(),
    })
}

pub fn write_feature(path: &Path, fmap: &FeatureMap) -> Result<()> {
    write_atomic(path, &encode_feature(fmap))
}

pub fn read_feature(path: &Path) -> Result<FeatureMap> {
    let bytes = fs::read(path)?;
    decode_feature(&bytes).map_err(|e| match e {
        Error::Parse { offset, message } => Error::Parse {
            offset,
            message: format!("{}: {message}", path.display()),
        },
        other => other,
    })
}

pub fn write_annotation(path: &Path, ann: &ImageAnnotation) -> Result<()> {
    ann.validate()?;
    write_json_atomic(path, ann)
}

pub fn read_annotation(path: &Path) -> Result<ImageAnnotation> {
    let ann: ImageAnnotation = read_json(path)?;
    ann.validate().map_err(|e| Error::Parse {
        offset: 0,
        message: format!("{}: {e}", path.display()),
    })?;
    Ok(ann)
}

/// Class-agnostic candidate boxes for one image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProposalSet {
    pub image_id: ImageId,
    pub boxes: Vec<BoundingBox>,
}

pub fn write_proposals(path: &Path, p: &ProposalSet) -> Result<()> {
    write_json_atomic(path, p)
}

pub fn read_proposals(path: &Path) -> Result<ProposalSet> {
    read_json(path)
}
