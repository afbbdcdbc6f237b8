//! Binary weight files.
//!
//! Layout, all integers little-endian `u32`:
//!
//! ```text
//! "PSEG0001"
//! count
//! count x { name_len, name bytes (UTF-8), rank, dims[rank] }
//! payloads: each tensor's values as f64 LE, in table order
//! ```

use std::path::Path;

use super::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"PSEG0001";

pub fn encode(entries: &[(&str, &Tensor)]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (name, t) in entries {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
    }
    for (_, t) in entries {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| format!("truncated at byte {} (needed {n} more)", self.pos))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> std::result::Result<usize, String> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes(b.try_into().unwrap()) as usize)
    }
}

pub fn decode(buf: &[u8]) -> std::result::Result<Vec<(String, Tensor)>, String> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(MAGIC.len()).map_err(|_| "bad magic".to_string())? != MAGIC {
        return Err("bad magic".into());
    }
    let count = r.u32()?;
    let mut table = Vec::with_capacity(count.min(4096));
    for _ in 0..count {
        let len = r.u32()?;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| "tensor name is not UTF-8".to_string())?
            .to_string();
        let rank = r.u32()?;
        let dims = (0..rank).map(|_| r.u32()).collect::<std::result::Result<Vec<_>, _>>()?;
        table.push((name, dims));
    }
    let mut out = Vec::with_capacity(table.len());
    for (name, dims) in table {
        let n: usize = dims.iter().product();
        let bytes = r.take(n.checked_mul(8).ok_or("tensor too large")?)?;
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let t = Tensor::new(dims, data).map_err(|e| e.to_string())?;
        out.push((name, t));
    }
    if r.pos != buf.len() {
        return Err(format!("{} trailing bytes", buf.len() - r.pos));
    }
    Ok(out)
}

pub fn save(path: &Path, entries: &[(&str, &Tensor)]) -> Result<()> {
    std::fs::write(path, encode(entries)).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<Vec<(String, Tensor)>> {
    let buf = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&buf).map_err(|msg| Error::format(path, msg))
}
