//! Binary checkpoint format.
//!
//! ```text
//! "FSICSF01"
//! repeated until end of file:
//!   u32 LE   name length in bytes
//!   [u8]     UTF-8 name
//!   u32 LE   rank
//!   u64 LE   dims[rank]
//!   f64 LE   values[product(dims)]
//! ```

use std::fs;
use std::path::Path;

use super::params::ParameterSet;
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"FSICSF01";

pub fn encode(params: &ParameterSet) -> Vec<u8> {
    let mut out = MAGIC.to_vec();
    for (name, t) in params.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in t.values() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    origin: &'a str,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(self.fail(format!("truncated at byte {}", self.pos)));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }

    fn fail(&self, message: String) -> Error {
        Error::Format {
            module: "autodiff",
            path: self.origin.to_string(),
            line: 0,
            message,
        }
    }
}

/// Decodes a checkpoint. Every parameter comes back trainable.
pub fn decode(bytes: &[u8], origin: &str) -> Result<ParameterSet> {
    let mut r = Reader {
        bytes,
        pos: 0,
        origin,
    };
    if r.take(MAGIC.len())? != MAGIC {
        return Err(r.fail("bad magic, expected FSICSF01".into()));
    }
    let mut params = ParameterSet::new();
    while r.pos < bytes.len() {
        let name_len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|e| r.fail(format!("parameter name is not UTF-8: {e}")))?
            .to_string();
        let rank = r.u32()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u64()? as usize);
        }
        let numel: usize = shape.iter().product();
        let values = r
            .take(numel * 8)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        if params.contains(&name) {
            return Err(r.fail(format!("duplicate parameter '{name}'")));
        }
        params.insert(name, Tensor::new(shape, values)?.with_requires_grad(true));
    }
    Ok(params)
}

pub fn save(params: &ParameterSet, path: &Path) -> Result<()> {
    fs::write(path, encode(params)).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<ParameterSet> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, &path.display().to_string())
}
