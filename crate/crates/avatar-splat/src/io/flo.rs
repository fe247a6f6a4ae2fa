//! Middlebury .flo optical-flow files: f32 magic 202021.25, i32 width and
//! height, then row-major interleaved (u, v) f32 pairs, all little-endian.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use super::{read_f32, read_f32_vec, read_i32, write_all_at, write_f32_slice};
use crate::error::{Error, Result};
use crate::flowdens::FlowField;

pub const FLO_MAGIC: f32 = 202021.25;
const MAX_DIM: i32 = 1 << 16;

pub fn read_flo(path: &Path) -> Result<FlowField> {
    let mut r = BufReader::new(File::open(path).map_err(|e| Error::io(path, e))?);
    let magic = read_f32(&mut r, path)?;
    if magic != FLO_MAGIC {
        return Err(Error::data(format!(
            "{}: bad flow magic {magic} (expected {FLO_MAGIC})",
            path.display()
        )));
    }
    let width = read_i32(&mut r, path)?;
    let height = read_i32(&mut r, path)?;
    if width <= 0 || height <= 0 || width > MAX_DIM || height > MAX_DIM {
        return Err(Error::data(format!(
            "{}: implausible flow dimensions {width}x{height}",
            path.display()
        )));
    }
    let n = width as usize * height as usize * 2;
    let vals = read_f32_vec(&mut r, n, path)?;
    Ok(FlowField {
        width: width as usize,
        height: height as usize,
        data: vals.into_iter().map(f64::from).collect(),
    })
}

pub fn write_flo(path: &Path, flow: &FlowField) -> Result<()> {
    let mut w = BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?);
    write_all_at(&mut w, &FLO_MAGIC.to_le_bytes(), path)?;
    write_all_at(&mut w, &(flow.width as i32).to_le_bytes(), path)?;
    write_all_at(&mut w, &(flow.height as i32).to_le_bytes(), path)?;
    let vals: Vec<f32> = flow.data.iter().map(|&v| v as f32).collect();
    write_f32_slice(&mut w, &vals, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::Vec2;

    #[test]
    fn roundtrip_preserves_f32_values() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.flo");
        let mut flow = FlowField::zeros(3, 2);
        flow.set(0, 0, Vec2::new(1.5, -2.25));
        flow.set(2, 1, Vec2::new(0.1f32 as f64, 1e6));
        write_flo(&path, &flow).unwrap();
        let back = read_flo(&path).unwrap();
        assert_eq!(back, flow);
    }

    #[test]
    fn rejects_bad_magic_and_dimensions() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.flo");
        std::fs::write(&path, 13.0f32.to_le_bytes()).unwrap();
        assert!(read_flo(&path).is_err());

        let mut bytes = Vec::new();
        bytes.extend_from_slice(&FLO_MAGIC.to_le_bytes());
        bytes.extend_from_slice(&(-4i32).to_le_bytes());
        bytes.extend_from_slice(&2i32.to_le_bytes());
        std::fs::write(&path, bytes).unwrap();
        assert!(read_flo(&path).is_err());
    }

    #[test]
    fn rejects_truncated_payload() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("short.flo");
        let mut bytes = Vec::new();
        bytes.extend_from_slice(&FLO_MAGIC.to_le_bytes());
        bytes.extend_from_slice(&2i32.to_le_bytes());
        bytes.extend_from_slice(&2i32.to_le_bytes());
        bytes.extend_from_slice(&1.0f32.to_le_bytes());
        std::fs::write(&path, bytes).unwrap();
        assert!(read_flo(&path).is_err());
    }
}
