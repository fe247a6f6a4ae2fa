mod grad;
mod oracle;
mod project;

pub use grad::render_backward;
pub use oracle::render_oracle;
pub use project::{point_projection_backward, project, project_backward, project_unculled, PosedSplatGrad};

use rayon::prelude::*;

use crate::camera::Camera;
use crate::img::Image;
use crate::math::*;

pub const TILE_SIZE: usize = 16;
/// Squared Mahalanobis cutoff (3σ): beyond this a splat contributes nothing.
pub const CUTOFF_D2: f64 = 9.0;
pub const ALPHA_MAX: f64 = 0.999;
/// Isotropic regularization added to every projected covariance, in px².
pub const COV2D_REG: f64 = 0.3;
pub const DEFAULT_EARLY_STOP: f64 = 1e-6;

/// A splat projected to screen space, ready for compositing.
#[derive(Debug, Clone)]
pub struct Splat2D {
    pub mean: Vec2,
    pub cov2d: Mat2,
    pub inv_cov: Mat2,
    /// Conservative half-extent of the 3σ footprint, in pixels.
    pub radius: Vec2,
    pub depth: f64,
    pub opacity: f64,
    pub color: [f64; 3],
    /// Index of the originating splat; depth-sort tiebreaker.
    pub source: u32,
}

#[derive(Debug, Clone, Copy)]
pub struct RenderOptions {
    pub tile_size: usize,
    /// Stop compositing a pixel once transmittance drops below this; 0 disables.
    pub early_stop: f64,
}

impl Default for RenderOptions {
    fn default() -> Self {
        RenderOptions {
            tile_size: TILE_SIZE,
            early_stop: DEFAULT_EARLY_STOP,
        }
    }
}

#[derive(Debug, Clone)]
pub struct RenderOutput {
    pub image: Image,
    /// Per-pixel coverage 1 - T_final.
    pub alpha: Vec<f64>,
    /// Per-pixel count of splats that contributed.
    pub contributors: Vec<u32>,
    /// Accumulated compositing weight Σ α·T per splat, indexed by source.
    pub contrib: Vec<f64>,
}

/// Gradients w.r.t. one `Splat2D`.
#[derive(Debug, Clone, Copy)]
pub struct SplatGrad {
    pub mean: Vec2,
    pub cov2d: Mat2,
    pub opacity: f64,
    pub color: [f64; 3],
}

impl SplatGrad {
    pub fn zeros() -> Self {
        SplatGrad {
            mean: Vec2::zeros(),
            cov2d: Mat2::zeros(),
            opacity: 0.0,
            color: [0.0; 3],
        }
    }
}

/// Per-tile splat index lists, each sorted front-to-back.
pub(crate) struct Binned {
    pub tile_lists: Vec<Vec<u32>>,
    pub tiles_x: usize,
}

/// Global depth sort (source index breaks ties) and conservative tile binning
/// from each splat's 3σ footprint.
pub(crate) fn bin_splats(splats: &[Splat2D], width: usize, height: usize, tile_size: usize) -> Binned {
    let mut order: Vec<u32> = (0..splats.len() as u32).collect();
    order.sort_unstable_by(|&a, &b| {
        let (sa, sb) = (&splats[a as usize], &splats[b as usize]);
        sa.depth.total_cmp(&sb.depth).then(sa.source.cmp(&sb.source))
    });

    let tiles_x = width.div_ceil(tile_size);
    let tiles_y = height.div_ceil(tile_size);
    let mut tile_lists = vec![Vec::new(); tiles_x * tiles_y];
    for &i in &order {
        let s = &splats[i as usize];
        let x0 = ((s.mean.x - s.radius.x) / tile_size as f64).floor().max(0.0) as usize;
        let y0 = ((s.mean.y - s.radius.y) / tile_size as f64).floor().max(0.0) as usize;
        let x1 = ((s.mean.x + s.radius.x) / tile_size as f64).floor().min((tiles_x - 1) as f64);
        let y1 = ((s.mean.y + s.radius.y) / tile_size as f64).floor().min((tiles_y - 1) as f64);
        if x1 < 0.0 || y1 < 0.0 {
            continue;
        }
        for ty in y0..=y1 as usize {
            for tx in x0..=x1 as usize {
                tile_lists[ty * tiles_x + tx].push(i);
            }
        }
    }
    Binned { tile_lists, tiles_x }
}

/// Front-to-back compositing of one pixel. Identical math for the tiled and
/// brute-force paths: splats beyond the 3σ cutoff contribute exactly nothing,
/// so pruning them from the iteration order cannot change the result.
#[inline]
pub(crate) fn composite_pixel<'a>(
    px: f64,
    py: f64,
    splats: impl Iterator<Item = &'a Splat2D>,
    background: [f64; 3],
    early_stop: f64,
    mut sink: impl FnMut(u32, f64),
) -> ([f64; 3], f64, u32) {
    let mut t = 1.0;
    let mut rgb = [0.0; 3];
    let mut n = 0u32;
    for s in splats {
        let dx = px - s.mean.x;
        let dy = py - s.mean.y;
        let d2 = s.inv_cov[(0, 0)] * dx * dx
            + 2.0 * s.inv_cov[(0, 1)] * dx * dy
            + s.inv_cov[(1, 1)] * dy * dy;
        if !(d2 <= CUTOFF_D2) {
            continue;
        }
        let alpha = (s.opacity * (-0.5 * d2).exp()).min(ALPHA_MAX);
        if alpha <= 0.0 {
            continue;
        }
        let w = alpha * t;
        rgb[0] += s.color[0] * w;
        rgb[1] += s.color[1] * w;
        rgb[2] += s.color[2] * w;
        n += 1;
        sink(s.source, w);
        t *= 1.0 - alpha;
        if t < early_stop {
            break;
        }
    }
    rgb[0] += t * background[0];
    rgb[1] += t * background[1];
    rgb[2] += t * background[2];
    (rgb, t, n)
}

pub(crate) fn contrib_len(splats: &[Splat2D]) -> usize {
    splats.iter().map(|s| s.source as usize + 1).max().unwrap_or(0)
}

struct TileOut {
    x0: usize,
    y0: usize,
    w: usize,
    h: usize,
    rgb: Vec<f64>,
    alpha: Vec<f64>,
    contributors: Vec<u32>,
    contrib: Vec<f64>,
}

/// Tiled front-to-back rasterization of depth-sorted splats.
pub fn render(splats: &[Splat2D], cam: &Camera, background: [f64; 3], opts: &RenderOptions) -> RenderOutput {
    let (width, height) = (cam.width as usize, cam.height as usize);
    let binned = bin_splats(splats, width, height, opts.tile_size);
    let n_sources = contrib_len(splats);

    let tiles: Vec<TileOut> = (0..binned.tile_lists.len())
        .into_par_iter()
        .map(|ti| {
            let tx = ti % binned.tiles_x;
            let ty = ti / binned.tiles_x;
            let x0 = tx * opts.tile_size;
            let y0 = ty * opts.tile_size;
            let w = opts.tile_size.min(width - x0);
            let h = opts.tile_size.min(height - y0);
            let list = &binned.tile_lists[ti];
            let mut out = TileOut {
                x0,
                y0,
                w,
                h,
                rgb: vec![0.0; w * h * 3],
                alpha: vec![0.0; w * h],
                contributors: vec![0; w * h],
                contrib: vec![0.0; n_sources],
            };
            for py in 0..h {
                for px in 0..w {
                    let (rgb, t, n) = composite_pixel(
                        (x0 + px) as f64 + 0.5,
                        (y0 + py) as f64 + 0.5,
                        list.iter().map(|&i| &splats[i as usize]),
                        background,
                        opts.early_stop,
                        |src, w| out.contrib[src as usize] += w,
                    );
                    let o = py * w + px;
                    out.rgb[o * 3..o * 3 + 3].copy_from_slice(&rgb);
                    out.alpha[o] = 1.0 - t;
                    out.contributors[o] = n;
                }
            }
            out
        })
        .collect();

    let mut image = Image::zeros(width, height, 3);
    let mut alpha = vec![0.0; width * height];
    let mut contributors = vec![0u32; width * height];
    let mut contrib = vec![0.0; n_sources];
    for t in tiles {
        for py in 0..t.h {
            for px in 0..t.w {
                let src = py * t.w + px;
                let dst = (t.y0 + py) * width + (t.x0 + px);
                image.data[dst * 3..dst * 3 + 3].copy_from_slice(&t.rgb[src * 3..src * 3 + 3]);
                alpha[dst] = t.alpha[src];
                contributors[dst] = t.contributors[src];
            }
        }
        for (acc, c) in contrib.iter_mut().zip(&t.contrib) {
            *acc += c;
        }
    }
    RenderOutput {
        image,
        alpha,
        contributors,
        contrib,
    }
}
