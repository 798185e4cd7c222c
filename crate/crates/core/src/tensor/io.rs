//! Flat binary tensor container: `SDT1`, u32 rank, u32 extents, f64 payload,
//! all little-endian. Several records may be concatenated in one file.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use super::Tensor;
use crate::error::{Error, Result};

pub const TENSOR_MAGIC: &[u8; 4] = b"SDT1";

pub fn encode_tensor(t: &Tensor, out: &mut Vec<u8>) {
    out.extend_from_slice(TENSOR_MAGIC);
    out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
    for &e in t.shape() {
        out.extend_from_slice(&(e as u32).to_le_bytes());
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn decode_tensor(buf: &[u8], pos: &mut usize) -> Result<Tensor> {
    let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
        let end = pos
            .checked_add(n)
            .filter(|&e| e <= buf.len())
            .ok_or_else(|| Error::Format(format!("truncated tensor record at byte {}", *pos)))?;
        let s = &buf[*pos..end];
        *pos = end;
        Ok(s)
    };
    if take(pos, 4)? != TENSOR_MAGIC {
        return Err(Error::Format("bad tensor magic, expected SDT1".into()));
    }
    let rank = u32::from_le_bytes(take(pos, 4)?.try_into().unwrap()) as usize;
    if rank > 16 {
        return Err(Error::Format(format!("implausible tensor rank {rank}")));
    }
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        shape.push(u32::from_le_bytes(take(pos, 4)?.try_into().unwrap()) as usize);
    }
    let n = shape
        .iter()
        .try_fold(1usize, |a, &e| a.checked_mul(e))
        .ok_or_else(|| Error::Format("tensor extent overflow".into()))?;
    let bytes = take(pos, n.checked_mul(8).ok_or_else(|| Error::Format("payload overflow".into()))?)?;
    let data = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Tensor::new(&shape, data)
}

pub fn write_tensor(path: &Path, t: &Tensor) -> Result<()> {
    write_tensors(path, std::slice::from_ref(t))
}

pub fn write_tensors(path: &Path, ts: &[Tensor]) -> Result<()> {
    let mut buf = Vec::new();
    for t in ts {
        encode_tensor(t, &mut buf);
    }
    let mut f = fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

pub fn read_tensor(path: &Path) -> Result<Tensor> {
    let mut ts = read_tensors(path)?;
    if ts.len() != 1 {
        return Err(Error::Format(format!(
            "expected one tensor record, found {}",
            ts.len()
        )));
    }
    Ok(ts.pop().unwrap())
}

pub fn read_tensors(path: &Path) -> Result<Vec<Tensor>> {
    let mut buf = Vec::new();
    fs::File::open(path)?.read_to_end(&mut buf)?;
    let mut pos = 0;
    let mut out = Vec::new();
    while pos < buf.len() {
        out.push(decode_tensor(&buf, &mut pos)?);
    }
    Ok(out)
}
