//! Raw float image files: ASCII magic "IMGF", u32 height, width, channels,
//! then row-major channel-interleaved f32 samples, all little-endian.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use super::{read_exact_at, read_f32_vec, read_u32, write_all_at, write_f32_slice};
use crate::error::{Error, Result};
use crate::img::Image;

pub const IMGF_MAGIC: &[u8; 4] = b"IMGF";
const MAX_DIM: u32 = 1 << 16;

pub fn read_imgf(path: &Path) -> Result<Image> {
    let mut r = BufReader::new(File::open(path).map_err(|e| Error::io(path, e))?);
    let mut magic = [0u8; 4];
    read_exact_at(&mut r, &mut magic, path)?;
    if &magic != IMGF_MAGIC {
        return Err(Error::data(format!("{}: not an IMGF file", path.display())));
    }
    let height = read_u32(&mut r, path)?;
    let width = read_u32(&mut r, path)?;
    let channels = read_u32(&mut r, path)?;
    if height == 0 || width == 0 || height > MAX_DIM || width > MAX_DIM || !(1..=4).contains(&channels) {
        return Err(Error::data(format!(
            "{}: implausible image header {width}x{height}x{channels}",
            path.display()
        )));
    }
    let n = height as usize * width as usize * channels as usize;
    let vals = read_f32_vec(&mut r, n, path)?;
    Image::from_data(
        width as usize,
        height as usize,
        channels as usize,
        vals.into_iter().map(f64::from).collect(),
    )
}

pub fn write_imgf(path: &Path, img: &Image) -> Result<()> {
    let mut w = BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?);
    write_all_at(&mut w, IMGF_MAGIC, path)?;
    write_all_at(&mut w, &(img.height as u32).to_le_bytes(), path)?;
    write_all_at(&mut w, &(img.width as u32).to_le_bytes(), path)?;
    write_all_at(&mut w, &(img.channels as u32).to_le_bytes(), path)?;
    let vals: Vec<f32> = img.data.iter().map(|&v| v as f32).collect();
    write_f32_slice(&mut w, &vals, path)
}
