use rayon::prelude::*;

use crate::camera::Camera;
use crate::img::Image;
use crate::math::*;

use super::{bin_splats, RenderOptions, Splat2D, SplatGrad, ALPHA_MAX, CUTOFF_D2};

/// Backward pass of `render`: per-pixel image gradients to per-splat
/// gradients. Tiles replay their forward compositing to recover each
/// contributor's transmittance, then walk the contributors back-to-front:
///
///   dL/dα_i = Σ_c u_c (T_i c_i,c - S_i,c / (1 - α_i))
///
/// with S_i the color accumulated behind splat i (including background).
/// Per-tile accumulators merge in fixed tile order, so results do not depend
/// on thread count.
pub fn render_backward(
    splats: &[Splat2D],
    cam: &Camera,
    background: [f64; 3],
    upstream: &Image,
    opts: &RenderOptions,
) -> Vec<SplatGrad> {
    let (width, height) = (cam.width as usize, cam.height as usize);
    assert_eq!(upstream.width, width);
    assert_eq!(upstream.height, height);
    assert_eq!(upstream.channels, 3);
    let binned = bin_splats(splats, width, height, opts.tile_size);

    let tile_grads: Vec<Vec<SplatGrad>> = (0..binned.tile_lists.len())
        .into_par_iter()
        .map(|ti| {
            let list = &binned.tile_lists[ti];
            let mut local: Vec<SplatGrad> = vec![SplatGrad::zeros(); list.len()];
            // dL/d(inv_cov) accumulates separately; it converts to dL/d(cov2d)
            // once per tile since the transform is linear in the accumulant.
            let mut d_inv: Vec<Mat2> = vec![Mat2::zeros(); list.len()];
            if list.is_empty() {
                return local;
            }
            let tx = ti % binned.tiles_x;
            let ty = ti / binned.tiles_x;
            let x0 = tx * opts.tile_size;
            let y0 = ty * opts.tile_size;
            let w = opts.tile_size.min(width - x0);
            let h = opts.tile_size.min(height - y0);
            // Forward replay scratch: (index into list, alpha, T before).
            let mut hits: Vec<(usize, f64, f64)> = Vec::with_capacity(list.len());
            for py in 0..h {
                for px in 0..w {
                    let cx = (x0 + px) as f64 + 0.5;
                    let cy = (y0 + py) as f64 + 0.5;
                    hits.clear();
                    let mut t = 1.0;
                    for (k, &i) in list.iter().enumerate() {
                        let s = &splats[i as usize];
                        let dx = cx - s.mean.x;
                        let dy = cy - s.mean.y;
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
                        hits.push((k, alpha, t));
                        t *= 1.0 - alpha;
                        if t < opts.early_stop {
                            break;
                        }
                    }
                    let o = upstream.idx(x0 + px, y0 + py, 0);
                    let up = [upstream.data[o], upstream.data[o + 1], upstream.data[o + 2]];
                    // Color behind the splat under consideration.
                    let mut behind = [t * background[0], t * background[1], t * background[2]];
                    for &(k, alpha, t_before) in hits.iter().rev() {
                        let s = &splats[list[k] as usize];
                        let weight = alpha * t_before;
                        let g = &mut local[k];
                        let mut d_alpha = 0.0;
                        for c in 0..3 {
                            g.color[c] += up[c] * weight;
                            d_alpha += up[c] * (t_before * s.color[c] - behind[c] / (1.0 - alpha));
                            behind[c] += s.color[c] * weight;
                        }
                        // Through the clamp dα vanishes; the replay still
                        // tracked alpha for the compositing bookkeeping.
                        let dx = cx - s.mean.x;
                        let dy = cy - s.mean.y;
                        let d2 = s.inv_cov[(0, 0)] * dx * dx
                            + 2.0 * s.inv_cov[(0, 1)] * dx * dy
                            + s.inv_cov[(1, 1)] * dy * dy;
                        let gauss = (-0.5 * d2).exp();
                        if s.opacity * gauss > ALPHA_MAX {
                            continue;
                        }
                        g.opacity += d_alpha * gauss;
                        let d_d2 = d_alpha * s.opacity * gauss * -0.5;
                        let md = s.inv_cov * Vec2::new(dx, dy);
                        g.mean -= 2.0 * d_d2 * md;
                        let delta = Vec2::new(dx, dy);
                        d_inv[k] += d_d2 * delta * delta.transpose();
                    }
                }
            }
            for (k, &i) in list.iter().enumerate() {
                let m = &splats[i as usize].inv_cov;
                local[k].cov2d = -m * d_inv[k] * m;
            }
            local
        })
        .collect();

    let mut grads = vec![SplatGrad::zeros(); splats.len()];
    for (ti, local) in tile_grads.iter().enumerate() {
        for (k, g) in local.iter().enumerate() {
            let i = binned.tile_lists[ti][k] as usize;
            let out = &mut grads[i];
            out.mean += g.mean;
            out.cov2d += g.cov2d;
            out.opacity += g.opacity;
            for c in 0..3 {
                out.color[c] += g.color[c];
            }
        }
    }
    grads
}
