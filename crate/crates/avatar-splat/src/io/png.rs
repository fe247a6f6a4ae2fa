use std::path::Path;

use crate::error::{Error, Result};
use crate::img::Image;

/// Writes an RGB image, clamping [0, 1] floats to 8-bit.
pub fn save_png(path: &Path, img: &Image) -> Result<()> {
    if img.channels != 3 {
        return Err(Error::data(format!(
            "png export needs 3 channels, got {}",
            img.channels
        )));
    }
    let mut buf = image::RgbImage::new(img.width as u32, img.height as u32);
    for y in 0..img.height {
        for x in 0..img.width {
            let px = buf.get_pixel_mut(x as u32, y as u32);
            for ch in 0..3 {
                px.0[ch] = (img.get(x, y, ch).clamp(0.0, 1.0) * 255.0).round() as u8;
            }
        }
    }
    buf.save(path)
        .map_err(|e| Error::data(format!("{}: png encode failed: {e}", path.display())))
}

pub fn load_png(path: &Path) -> Result<Image> {
    let img = image::open(path)
        .map_err(|e| Error::data(format!("{}: png decode failed: {e}", path.display())))?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut out = Image::zeros(w, h, 3);
    for y in 0..h {
        for x in 0..w {
            let px = img.get_pixel(x as u32, y as u32);
            for ch in 0..3 {
                out.set(x, y, ch, px.0[ch] as f64 / 255.0);
            }
        }
    }
    Ok(out)
}
