pub mod checkpoint;
pub mod dataset;
pub mod flo;
pub mod imgf;
pub mod png;

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub(crate) fn read_exact_at(r: &mut impl Read, buf: &mut [u8], path: &Path) -> Result<()> {
    r.read_exact(buf).map_err(|e| Error::io(path, e))
}

pub(crate) fn read_u32(r: &mut impl Read, path: &Path) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact_at(r, &mut b, path)?;
    Ok(u32::from_le_bytes(b))
}

pub(crate) fn read_i32(r: &mut impl Read, path: &Path) -> Result<i32> {
    let mut b = [0u8; 4];
    read_exact_at(r, &mut b, path)?;
    Ok(i32::from_le_bytes(b))
}

pub(crate) fn read_f32(r: &mut impl Read, path: &Path) -> Result<f32> {
    let mut b = [0u8; 4];
    read_exact_at(r, &mut b, path)?;
    Ok(f32::from_le_bytes(b))
}

pub(crate) fn read_f32_vec(r: &mut impl Read, n: usize, path: &Path) -> Result<Vec<f32>> {
    let mut bytes = vec![0u8; n * 4];
    read_exact_at(r, &mut bytes, path)?;
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

pub(crate) fn write_all_at(w: &mut impl Write, buf: &[u8], path: &Path) -> Result<()> {
    w.write_all(buf).map_err(|e| Error::io(path, e))
}

pub(crate) fn write_f32_slice(w: &mut impl Write, vals: &[f32], path: &Path) -> Result<()> {
    let mut bytes = Vec::with_capacity(vals.len() * 4);
    for v in vals {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    write_all_at(w, &bytes, path)
}
