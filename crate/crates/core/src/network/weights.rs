//! The `LYTW` weights container.
//!
//! ```text
//! "LYTW"  u32 version  u32 count
//! count × { u32 name_len, name bytes, u32 rank, rank × u32 extent, f32 data... }
//! ```
//!
//! Every integer and float is little-endian.

use std::io::{Read, Write};

use super::Parameters;
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

pub const MAGIC: &[u8; 4] = b"LYTW";
pub const VERSION: u32 = 1;

/// Serializes named tensors as 32-bit floats.
pub fn encode<T: Real>(params: &Parameters<T>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for e in params.entries() {
        out.extend_from_slice(&(e.name.len() as u32).to_le_bytes());
        out.extend_from_slice(e.name.as_bytes());
        out.extend_from_slice(&(e.tensor.rank() as u32).to_le_bytes());
        for &d in e.tensor.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in e.tensor.data() {
            out.extend_from_slice(&v.to_f32().unwrap_or(f32::NAN).to_le_bytes());
        }
    }
    out
}

pub fn write<T: Real, W: Write>(params: &Parameters<T>, mut w: W) -> std::io::Result<()> {
    w.write_all(&encode(params))
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::BadWeights(format!("truncated while reading {what}")));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

/// Parses a weights file into `(name, tensor)` pairs in file order.
pub fn decode(bytes: &[u8]) -> Result<Vec<(String, Tensor<f32>)>> {
    let mut c = Cursor { bytes, pos: 0 };
    if c.take(4, "magic").ok() != Some(MAGIC.as_slice()) {
        return Err(Error::BadWeights("missing LYTW magic".into()));
    }
    let version = c.u32("version")?;
    if version != VERSION {
        return Err(Error::BadWeights(format!("unsupported version {version}")));
    }
    let count = c.u32("parameter count")? as usize;
    let mut out = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let len = c.u32("name length")? as usize;
        let name = std::str::from_utf8(c.take(len, "name")?)
            .map_err(|_| Error::BadWeights("parameter name is not UTF-8".into()))?
            .to_owned();
        let rank = c.u32("rank")? as usize;
        let mut shape = Vec::with_capacity(rank.min(8));
        for _ in 0..rank {
            shape.push(c.u32("extent")? as usize);
        }
        let n: usize = shape.iter().product();
        let raw = c.take(n.checked_mul(4).ok_or_else(|| Error::BadWeights("size overflow".into()))?, "data")?;
        let data = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        let tensor = Tensor::new(shape, data).map_err(|e| Error::BadWeights(format!("{name}: {e}")))?;
        out.push((name, tensor));
    }
    if c.pos != bytes.len() {
        return Err(Error::BadWeights(format!("{} trailing bytes", bytes.len() - c.pos)));
    }
    Ok(out)
}

pub fn read<R: Read>(mut r: R) -> Result<Vec<(String, Tensor<f32>)>> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)
        .map_err(|e| Error::BadWeights(e.to_string()))?;
    decode(&bytes)
}

/// Loads `bytes` into `params`, matching tensors by name.
pub fn load_into(params: &mut Parameters<f32>, bytes: &[u8]) -> Result<()> {
    params.assign_named(decode(bytes)?)
}
