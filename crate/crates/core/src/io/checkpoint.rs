//! Binary container for named f64 tensors, used for backbone and quantized
//! model checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic   b"QART"
//! u32     format version (1)
//! u64     tensor count
//! repeat: u32 name length, name bytes (utf-8),
//!         u32 ndim, u64 dims...,
//!         f64 data (product of dims values)
//! ```

use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{QartError, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"QART";
const VERSION: u32 = 1;

pub fn encode_tensors(tensors: &[(String, Tensor)]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(tensors.len() as u64).to_le_bytes());
    for (name, t) in tensors {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn chunk(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| {
                QartError::format(self.pos, format!("truncated while reading {}", what))
            })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.chunk(4, what)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.chunk(8, what)?.try_into().expect("8 bytes"),
        ))
    }
}

pub fn decode_tensors(bytes: &[u8]) -> Result<Vec<(String, Tensor)>> {
    let mut cur = Cursor { bytes, pos: 0 };
    if cur.chunk(4, "magic")? != MAGIC {
        return Err(QartError::format(0, "bad magic, not a checkpoint"));
    }
    let version = cur.u32("version")?;
    if version != VERSION {
        return Err(QartError::format(
            4,
            format!("unsupported version {}", version),
        ));
    }
    let count = cur.u64("tensor count")? as usize;
    if count > 1_000_000 {
        return Err(QartError::format(
            8,
            format!("implausible tensor count {}", count),
        ));
    }
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        let name_len = cur.u32("name length")? as usize;
        if name_len > 4096 {
            return Err(QartError::format(
                cur.pos - 4,
                format!("implausible name length {}", name_len),
            ));
        }
        let name_pos = cur.pos;
        let name = String::from_utf8(cur.chunk(name_len, "name")?.to_vec())
            .map_err(|_| QartError::format(name_pos, "tensor name is not utf-8"))?;
        let ndim = cur.u32("ndim")? as usize;
        if ndim > 8 {
            return Err(QartError::format(
                cur.pos - 4,
                format!("implausible rank {}", ndim),
            ));
        }
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(cur.u64("dimension")? as usize);
        }
        let numel: usize = shape.iter().product();
        if numel > 50_000_000 {
            return Err(QartError::format(
                cur.pos,
                format!("implausible element count {}", numel),
            ));
        }
        let data_bytes = cur.chunk(numel * 8, &format!("data of tensor {}", i))?;
        let data: Vec<f64> = data_bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        out.push((name, Tensor::from_vec(shape, data)?));
    }
    if cur.pos != bytes.len() {
        return Err(QartError::format(
            cur.pos,
            format!(
                "{} trailing bytes after the last tensor",
                bytes.len() - cur.pos
            ),
        ));
    }
    Ok(out)
}

pub fn save_tensors(path: impl AsRef<Path>, tensors: &[(String, Tensor)]) -> Result<()> {
    std::fs::write(path, encode_tensors(tensors))?;
    Ok(())
}

pub fn load_tensors(path: impl AsRef<Path>) -> Result<Vec<(String, Tensor)>> {
    let bytes = std::fs::read(path.as_ref())
        .map_err(|e| QartError::Data(format!("reading {}: {}", path.as_ref().display(), e)))?;
    decode_tensors(&bytes)
}

/// Hex SHA-256 over names, shapes and raw values; the anchor for verifying
/// that frozen weights never move.
pub fn digest_tensors(tensors: &[(String, Tensor)]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(encode_tensors(tensors));
    let out = hasher.finalize();
    out.iter().map(|b| format!("{:02x}", b)).collect()
}
