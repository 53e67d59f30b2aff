//! Binary checkpoint format.
//!
//! ```text
//! "MCCECKPT" | version u8 (=1) | width u8 (4 or 8)
//! repeated until EOF:
//!   name_len u64 | name utf-8 | rank u64 | dims u64 x rank | payload (f32 or f64)
//! ```
//! All integers and floats are little-endian.

use std::fs;
use std::path::Path;

use ndarray::{ArrayD, IxDyn};

use super::params::ParameterSet;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"MCCECKPT";
pub const VERSION: u8 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

impl Precision {
    fn width(self) -> u8 {
        match self {
            Precision::F32 => 4,
            Precision::F64 => 8,
        }
    }
}

pub fn encode_checkpoint(set: &ParameterSet, precision: Precision) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.push(precision.width());
    for (name, t) in &set.tensors {
        out.extend_from_slice(&(name.len() as u64).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.ndim() as u64).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &x in t.iter() {
            match precision {
                Precision::F32 => out.extend_from_slice(&(x as f32).to_le_bytes()),
                Precision::F64 => out.extend_from_slice(&x.to_le_bytes()),
            }
        }
    }
    out
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<(ParameterSet, Precision)> {
    let mut c = Cursor { buf: bytes, pos: 0 };
    if c.take(8)? != MAGIC {
        return Err(Error::Checkpoint("bad magic bytes".into()));
    }
    let version = c.take(1)?[0];
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let precision = match c.take(1)?[0] {
        4 => Precision::F32,
        8 => Precision::F64,
        w => return Err(Error::Checkpoint(format!("unsupported float width {w}"))),
    };
    let mut tensors = Vec::new();
    while c.pos < bytes.len() {
        let name_len = c.u64()? as usize;
        let name = std::str::from_utf8(c.take(name_len)?)
            .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?
            .to_string();
        let rank = c.u64()? as usize;
        if rank > 8 {
            return Err(Error::Checkpoint(format!(
                "tensor {name:?} has rank {rank}"
            )));
        }
        let dims = (0..rank)
            .map(|_| c.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let count: usize = dims.iter().product();
        let width = precision.width() as usize;
        let raw = c.take(
            count
                .checked_mul(width)
                .ok_or_else(|| Error::Checkpoint(format!("tensor {name:?} is too large")))?,
        )?;
        let data: Vec<f64> = match precision {
            Precision::F32 => raw
                .chunks_exact(4)
                .map(|b| f64::from(f32::from_le_bytes(b.try_into().expect("4 bytes"))))
                .collect(),
            Precision::F64 => raw
                .chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
                .collect(),
        };
        let t = ArrayD::from_shape_vec(IxDyn(&dims), data)
            .map_err(|e| Error::Checkpoint(e.to_string()))?;
        tensors.push((name, t));
    }
    Ok((ParameterSet::new(tensors)?, precision))
}

pub fn save_checkpoint(path: &Path, set: &ParameterSet, precision: Precision) -> Result<()> {
    fs::write(path, encode_checkpoint(set, precision)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<(ParameterSet, Precision)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}
