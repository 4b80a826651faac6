//! Binary parameter container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic     8 bytes  "FGTNCKPT"
//! version   u32      1
//! header    u64 length + UTF-8 JSON (model config and metadata)
//! count     u32      number of tensors
//! tensor*   u32 name length + UTF-8 name, u32 rank, u64 dims[rank],
//!           f64 values[product(dims)]
//! ```

use std::io::{Read, Write};
use std::path::Path;

use super::params::ModelParams;
use super::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"FGTNCKPT";
pub const VERSION: u32 = 1;

pub fn encode(header: &str, params: &ModelParams) -> Vec<u8> {
    let mut out = Vec::with_capacity(64 + params.scalar_count() * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(header.as_bytes());
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for p in params.iter() {
        out.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
        out.extend_from_slice(p.name.as_bytes());
        out.extend_from_slice(&2u32.to_le_bytes());
        for d in p.value.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in p.value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        if self.pos + n > self.buf.len() {
            return Err(format!("truncated at byte {}", self.pos));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> std::result::Result<u64, String> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self, n: usize) -> std::result::Result<String, String> {
        String::from_utf8(self.take(n)?.to_vec()).map_err(|e| e.to_string())
    }
}

/// Returns the JSON header and the named tensors in stored order.
pub fn decode(bytes: &[u8]) -> std::result::Result<(String, Vec<(String, Tensor)>), String> {
    let mut c = Cursor { buf: bytes, pos: 0 };
    if c.take(8)? != MAGIC {
        return Err("not a checkpoint (bad magic)".into());
    }
    let version = c.u32()?;
    if version != VERSION {
        return Err(format!("unsupported checkpoint version {version}"));
    }
    let hlen = c.u64()? as usize;
    let header = c.string(hlen)?;
    let count = c.u32()? as usize;
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        let nlen = c.u32()? as usize;
        let name = c.string(nlen)?;
        let rank = c.u32()? as usize;
        let dims = (0..rank)
            .map(|_| c.u64().map(|d| d as usize))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        let (rows, cols) = match dims.as_slice() {
            [] => (1, 1),
            [n] => (1, *n),
            [r, c] => (*r, *c),
            _ => return Err(format!("tensor `{name}` has unsupported rank {rank}")),
        };
        let raw = c.take(rows * cols * 8)?;
        let data = raw
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
            .collect();
        tensors.push((name, Tensor::from_vec(rows, cols, data).map_err(|e| e.to_string())?));
    }
    if c.pos != bytes.len() {
        return Err("trailing bytes after last tensor".into());
    }
    Ok((header, tensors))
}

pub fn write(path: &Path, header: &str, params: &ModelParams) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&encode(header, params)).map_err(|e| Error::io(path, e))
}

pub fn read(path: &Path) -> Result<(String, Vec<(String, Tensor)>)> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    decode(&bytes).map_err(|m| Error::parse(path, m))
}

/// Copies stored tensors into `params`, which must have exactly the same
/// names and shapes.
pub fn restore(params: &mut ModelParams, tensors: Vec<(String, Tensor)>) -> Result<()> {
    if tensors.len() != params.len() {
        return Err(Error::ConfigMismatch(format!(
            "checkpoint has {} tensors, model expects {}",
            tensors.len(),
            params.len()
        )));
    }
    for (name, t) in tensors {
        let id = params
            .find(&name)
            .ok_or_else(|| Error::ConfigMismatch(format!("unexpected tensor `{name}`")))?;
        let p = params.get_mut(id);
        if p.value.shape() != t.shape() {
            return Err(Error::ConfigMismatch(format!(
                "tensor `{name}` has shape {:?}, model expects {:?}",
                t.shape(),
                p.value.shape()
            )));
        }
        p.value = t;
    }
    Ok(())
}
