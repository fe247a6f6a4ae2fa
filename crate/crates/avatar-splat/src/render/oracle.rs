use crate::camera::Camera;
use crate::gauss::PosedGaussian;
use crate::img::Image;

use super::project::project_unculled;
use super::{composite_pixel, contrib_len, RenderOptions, RenderOutput, Splat2D};

/// Brute-force reference renderer: every pixel composites every depth-sorted
/// splat, with no tiling and no footprint culling. Shares the per-pixel math
/// with the tiled path, so the two agree bit-for-bit.
pub fn render_oracle(
    posed: &[PosedGaussian],
    colors: &[[f64; 3]],
    cam: &Camera,
    background: [f64; 3],
    opts: &RenderOptions,
) -> RenderOutput {
    let mut splats: Vec<Splat2D> = posed
        .iter()
        .zip(colors)
        .enumerate()
        .filter_map(|(i, (p, &c))| project_unculled(p, c, cam, i as u32))
        .collect();
    splats.sort_unstable_by(|a, b| a.depth.total_cmp(&b.depth).then(a.source.cmp(&b.source)));

    let (width, height) = (cam.width as usize, cam.height as usize);
    let mut image = Image::zeros(width, height, 3);
    let mut alpha = vec![0.0; width * height];
    let mut contributors = vec![0u32; width * height];
    let mut contrib = vec![0.0; contrib_len(&splats)];
    for py in 0..height {
        for px in 0..width {
            let (rgb, t, n) = composite_pixel(
                px as f64 + 0.5,
                py as f64 + 0.5,
                splats.iter(),
                background,
                opts.early_stop,
                |src, w| contrib[src as usize] += w,
            );
            let o = py * width + px;
            image.data[o * 3..o * 3 + 3].copy_from_slice(&rgb);
            alpha[o] = 1.0 - t;
            contributors[o] = n;
        }
    }
    RenderOutput {
        image,
        alpha,
        contributors,
        contrib,
    }
}
