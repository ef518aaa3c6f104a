//! The `XNNT` binary tensor record.
//!
//! Layout: magic `XNNT`, `u32` version, `u32` spatial rank, `u32` total rank,
//! that many `u64` axis lengths, then the values as `f64`, all little-endian.

use std::io::{Read, Write};

use super::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"XNNT";
pub const VERSION: u32 = 1;

pub fn write_tensor(w: &mut impl Write, t: &Tensor) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(t.spatial_rank() as u32).to_le_bytes())?;
    w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
    for &n in t.shape() {
        w.write_all(&(n as u64).to_le_bytes())?;
    }
    let mut buf = Vec::with_capacity(t.len() * 8);
    for v in t.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn read_tensor(r: &mut impl Read) -> Result<Tensor> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::format("XNNT", "bad magic"));
    }
    let version = read_u32(r)?;
    if version != VERSION {
        return Err(Error::format("XNNT", format!("unsupported version {version}")));
    }
    let spatial = read_u32(r)? as usize;
    let rank = read_u32(r)? as usize;
    if rank != spatial + 1 {
        return Err(Error::format(
            "XNNT",
            format!("rank {rank} does not match spatial rank {spatial}"),
        ));
    }
    let mut shape = Vec::with_capacity(rank);
    let mut numel: usize = 1;
    for _ in 0..rank {
        let n = usize::try_from(read_u64(r)?).map_err(|_| Error::format("XNNT", "axis too long"))?;
        numel = numel
            .checked_mul(n)
            .ok_or_else(|| Error::format("XNNT", "element count overflows"))?;
        shape.push(n);
    }
    let mut bytes = Vec::new();
    r.take(numel as u64 * 8).read_to_end(&mut bytes)?;
    if bytes.len() != numel * 8 {
        return Err(Error::format("XNNT", "truncated data"));
    }
    let data = bytes
        .chunks_exact(8)
        .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
        .collect();
    Tensor::new(shape, data).map_err(|e| Error::format("XNNT", e.to_string()))
}

pub(crate) fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub(crate) fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

/// Writes a `u32` byte length followed by the UTF-8 bytes.
pub(crate) fn write_str(w: &mut impl Write, s: &str) -> Result<()> {
    w.write_all(&(s.len() as u32).to_le_bytes())?;
    w.write_all(s.as_bytes())?;
    Ok(())
}

pub(crate) fn read_str(r: &mut impl Read, format: &'static str) -> Result<String> {
    let n = read_u32(r)? as usize;
    let mut buf = Vec::new();
    r.take(n as u64).read_to_end(&mut buf)?;
    if buf.len() != n {
        return Err(Error::format(format, "truncated string"));
    }
    String::from_utf8(buf).map_err(|_| Error::format(format, "string is not UTF-8"))
}
