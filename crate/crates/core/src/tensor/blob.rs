//! Binary tensor blobs: magic `DTSR`, `u32` rank, `u64` dims, then the
//! row-major `f64` payload. Everything little-endian.

use std::io::{Read, Write};

use super::DiffTensor;
use crate::error::{format_err, Result};

pub const BLOB_MAGIC: &[u8; 4] = b"DTSR";

pub fn write_blob<W: Write>(w: &mut W, t: &DiffTensor) -> Result<()> {
    w.write_all(BLOB_MAGIC)?;
    w.write_all(&(t.rank() as u32).to_le_bytes())?;
    for &d in t.shape() {
        w.write_all(&(d as u64).to_le_bytes())?;
    }
    for v in t.values() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_blob<R: Read>(r: &mut R) -> Result<DiffTensor> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != BLOB_MAGIC {
        return Err(format_err(format!("bad tensor magic {magic:?}")));
    }
    let mut b4 = [0u8; 4];
    r.read_exact(&mut b4)?;
    let rank = u32::from_le_bytes(b4) as usize;
    if rank == 0 || rank > 16 {
        return Err(format_err(format!("implausible tensor rank {rank}")));
    }
    let mut shape = Vec::with_capacity(rank);
    let mut b8 = [0u8; 8];
    for _ in 0..rank {
        r.read_exact(&mut b8)?;
        shape.push(u64::from_le_bytes(b8) as usize);
    }
    let n = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| format_err("tensor size overflows"))?;
    let mut values = Vec::with_capacity(n);
    for _ in 0..n {
        r.read_exact(&mut b8)?;
        values.push(f64::from_le_bytes(b8));
    }
    DiffTensor::new(&shape, values)
}
