use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::camera::{Camera, NEAR_CLIP};
use crate::error::{Error, Result};
use crate::gauss::SpacetimeGaussian;
use crate::img::{Image, Mask};
use crate::math::*;

/// Dense 2D optical flow in pixels, row-major `height * width * 2` (u, v).
#[derive(Debug, Clone, PartialEq)]
pub struct FlowField {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl FlowField {
    pub fn zeros(width: usize, height: usize) -> Self {
        FlowField {
            width,
            height,
            data: vec![0.0; width * height * 2],
        }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> Vec2 {
        let i = (y * self.width + x) * 2;
        Vec2::new(self.data[i], self.data[i + 1])
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: Vec2) {
        let i = (y * self.width + x) * 2;
        self.data[i] = v.x;
        self.data[i + 1] = v.y;
    }

    /// Bilinear sample at pixel-center coordinates, clamped at borders.
    pub fn sample(&self, p: Vec2) -> Vec2 {
        let xf = (p.x - 0.5).clamp(0.0, (self.width - 1) as f64);
        let yf = (p.y - 0.5).clamp(0.0, (self.height - 1) as f64);
        let x0 = xf.floor() as usize;
        let y0 = yf.floor() as usize;
        let x1 = (x0 + 1).min(self.width - 1);
        let y1 = (y0 + 1).min(self.height - 1);
        let fx = xf - x0 as f64;
        let fy = yf - y0 as f64;
        let lerp = |a: Vec2, b: Vec2, t: f64| a * (1.0 - t) + b * t;
        lerp(
            lerp(self.get(x0, y0), self.get(x1, y0), fx),
            lerp(self.get(x0, y1), self.get(x1, y1), fx),
            fy,
        )
    }
}

/// Thresholds and scales for flow-guided densification.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default)]
pub struct DensifyConfig {
    /// Per-pixel mean-channel L1 above this marks a pixel dynamic.
    pub error_threshold: f64,
    /// Offset distance Δ along the flow direction for new splats.
    pub step_length: f64,
    /// Std-dev of the isotropic jitter on new splat positions.
    pub lateral_spread: f64,
    /// γ in the flow-weighted contribution C (1 + γ W).
    pub flow_protection: f64,
    /// Number of past frames whose flow magnitudes accumulate.
    pub window: usize,
    /// Accumulated flow magnitude (px) for a pixel to count as moving.
    pub motion_threshold: f64,
    /// Max pixel error between flow-predicted and actual reprojection.
    pub consistency_tol: f64,
    /// κ in the target density base·(1 + κ W).
    pub density_scale: f64,
    /// Screen-space cell size (px) for density accounting.
    pub cell_size: usize,
}

impl Default for DensifyConfig {
    fn default() -> Self {
        let step_length = 0.01;
        DensifyConfig {
            error_threshold: 0.05,
            step_length,
            lateral_spread: 0.25 * step_length,
            flow_protection: 0.5,
            window: 5,
            motion_threshold: 2.0,
            consistency_tol: 2.0,
            density_scale: 1.0,
            cell_size: 16,
        }
    }
}

/// Pixels whose mean-channel L1 between render and ground truth exceeds the
/// threshold.
pub fn detect_dynamic(render: &Image, gt: &Image, threshold: f64) -> Result<Mask> {
    render.require_same_shape(gt, "dynamic-region inputs")?;
    let mut mask = Mask::new(render.width, render.height);
    let c = render.channels as f64;
    for y in 0..render.height {
        for x in 0..render.width {
            let mut err = 0.0;
            for ch in 0..render.channels {
                err += (render.get(x, y, ch) - gt.get(x, y, ch)).abs();
            }
            mask.set(x, y, err / c > threshold);
        }
    }
    Ok(mask)
}

/// Accumulated flow magnitude over a window, the valid region it defines, and
/// the per-pixel motion strength W = clamp(acc / 2δ, 0, 1).
#[derive(Debug, Clone)]
pub struct MotionStats {
    pub width: usize,
    pub height: usize,
    pub accumulated: Vec<f64>,
    pub valid: Mask,
    pub strength: Vec<f64>,
}

pub fn motion_stats(flows: &[&FlowField], delta: f64) -> Result<MotionStats> {
    let first = flows.first().ok_or_else(|| Error::data("motion stats need at least one flow frame"))?;
    let (w, h) = (first.width, first.height);
    let mut acc = vec![0.0; w * h];
    for f in flows {
        if f.width != w || f.height != h {
            return Err(Error::data(format!(
                "flow frames disagree in shape: {w}x{h} vs {}x{}",
                f.width, f.height
            )));
        }
        for (a, uv) in acc.iter_mut().zip(f.data.chunks_exact(2)) {
            *a += (uv[0] * uv[0] + uv[1] * uv[1]).sqrt();
        }
    }
    let mut valid = Mask::new(w, h);
    for (i, &a) in acc.iter().enumerate() {
        valid.data[i] = a > delta;
    }
    let strength = acc.iter().map(|&a| (a / (2.0 * delta)).clamp(0.0, 1.0)).collect();
    Ok(MotionStats {
        width: w,
        height: h,
        accumulated: acc,
        valid,
        strength,
    })
}

impl MotionStats {
    pub fn strength_at(&self, p: Vec2) -> f64 {
        let x = (p.x.floor().max(0.0) as usize).min(self.width - 1);
        let y = (p.y.floor().max(0.0) as usize).min(self.height - 1);
        self.strength[y * self.width + x]
    }
}

/// Geometry of the seed splat needed to place a flow-guided sample.
pub struct SampleContext<'a> {
    pub camera: &'a Camera,
    /// Σ_b w_b R_b of the seed under the current pose.
    pub lbs_jacobian: Mat3,
    /// Posed world position of the seed at the sampling time.
    pub seed_world: Vec3,
}

/// Spawns a splat offset Δ along the flow direction (lifted to world space at
/// the seed's depth) with isotropic jitter. Fields clone from the seed; both
/// temporal centers reset to the sampling time, so the new splat's posed
/// position at `t` is exactly seed + offset.
pub fn sample_along_flow(
    seed: &SpacetimeGaussian,
    ctx: &SampleContext,
    flow_px: Vec2,
    t: f64,
    cfg: &DensifyConfig,
    rng: &mut impl Rng,
) -> Option<SpacetimeGaussian> {
    if flow_px.norm() <= 1e-6 {
        return None;
    }
    let z = ctx.camera.to_camera(ctx.seed_world).z;
    if z <= NEAR_CLIP {
        return None;
    }
    let cam_dir = Vec3::new(flow_px.x * z / ctx.camera.fx, flow_px.y * z / ctx.camera.fy, 0.0);
    let world = ctx.camera.rotation().transpose() * cam_dir;
    let norm = world.norm();
    if norm < 1e-12 {
        return None;
    }
    let dir = world / norm;
    let mut offset = dir * cfg.step_length;
    if cfg.lateral_spread > 0.0 {
        let normal = Normal::new(0.0, cfg.lateral_spread).ok()?;
        for k in 0..3 {
            offset[k] += normal.sample(rng);
        }
    }
    // Solve for a canonical position whose skinned image lands at
    // seed + offset; the blended rotation is invertible away from degenerate
    // opposing-bone blends.
    let j_inv = ctx
        .lbs_jacobian
        .try_inverse()
        .unwrap_or_else(|| ctx.lbs_jacobian.transpose());
    let canonical = seed.canonical_pos + j_inv * (seed.motion_offset(t) + offset);
    let mut out = seed.clone();
    out.canonical_pos = canonical;
    out.temporal_center_pos = t;
    out.temporal_center_rot = t;
    Some(out)
}

/// Pixel error between the flow-integrated prediction of the current position
/// and the actual current position. The flow from the previous frame is
/// integrated with one midpoint step.
pub fn consistency_error(prev_px: Vec2, cur_px: Vec2, flow_prev: &FlowField) -> f64 {
    let v1 = flow_prev.sample(prev_px);
    let v2 = flow_prev.sample(prev_px + v1);
    let predicted = prev_px + (v1 + v2) * 0.5;
    (predicted - cur_px).norm()
}

/// C^flow = C (1 + γ W): motion inflates a splat's pruning score.
pub fn flow_weighted_contribution(contribution: f64, strength: f64, gamma: f64) -> f64 {
    contribution * (1.0 + gamma * strength)
}

/// Screen-space splat-density accounting on a fixed cell grid.
#[derive(Debug, Clone)]
pub struct DensityReport {
    pub cells_x: usize,
    pub cells_y: usize,
    pub cell_size: usize,
    /// Splat centers per cell.
    pub count: Vec<f64>,
    /// base · (1 + κ W_cell).
    pub target: Vec<f64>,
    /// Mean motion strength over each cell's pixels.
    pub strength: Vec<f64>,
    /// Fraction of each cell's pixels inside the valid region.
    pub valid_frac: Vec<f64>,
    /// Median count over occupied cells.
    pub base: f64,
}

pub fn density_report(
    splat_px: &[Option<Vec2>],
    stats: &MotionStats,
    cfg: &DensifyConfig,
) -> DensityReport {
    let cells_x = stats.width.div_ceil(cfg.cell_size);
    let cells_y = stats.height.div_ceil(cfg.cell_size);
    let n = cells_x * cells_y;
    let mut count = vec![0.0; n];
    for p in splat_px.iter().flatten() {
        if p.x < 0.0 || p.y < 0.0 || p.x >= stats.width as f64 || p.y >= stats.height as f64 {
            continue;
        }
        let cx = p.x as usize / cfg.cell_size;
        let cy = p.y as usize / cfg.cell_size;
        count[cy * cells_x + cx] += 1.0;
    }
    let mut strength = vec![0.0; n];
    let mut valid_frac = vec![0.0; n];
    let mut pixels = vec![0.0; n];
    for y in 0..stats.height {
        for x in 0..stats.width {
            let c = (y / cfg.cell_size) * cells_x + x / cfg.cell_size;
            pixels[c] += 1.0;
            strength[c] += stats.strength[y * stats.width + x];
            if stats.valid.get(x, y) {
                valid_frac[c] += 1.0;
            }
        }
    }
    for c in 0..n {
        strength[c] /= pixels[c];
        valid_frac[c] /= pixels[c];
    }
    let mut occupied: Vec<f64> = count.iter().copied().filter(|&c| c > 0.0).collect();
    occupied.sort_by(f64::total_cmp);
    let base = if occupied.is_empty() {
        0.0
    } else {
        occupied[occupied.len() / 2]
    };
    let target = strength
        .iter()
        .map(|&w| base * (1.0 + cfg.density_scale * w))
        .collect();
    DensityReport {
        cells_x,
        cells_y,
        cell_size: cfg.cell_size,
        count,
        target,
        strength,
        valid_frac,
        base,
    }
}

impl DensityReport {
    /// Cells inside the valid region whose density falls short of target,
    /// with the shortfall in splats.
    pub fn deficit_cells(&self) -> Vec<(usize, usize, f64)> {
        let mut out = Vec::new();
        for cy in 0..self.cells_y {
            for cx in 0..self.cells_x {
                let c = cy * self.cells_x + cx;
                if self.valid_frac[c] > 0.0 && self.count[c] < self.target[c] {
                    out.push((cx, cy, self.target[c] - self.count[c]));
                }
            }
        }
        out
    }

    /// Mean density of moving cells (mostly inside the valid region) over
    /// mean density of occupied fully-static cells.
    pub fn moving_static_ratio(&self) -> Option<f64> {
        let mut moving = (0.0, 0usize);
        let mut stat = (0.0, 0usize);
        for c in 0..self.count.len() {
            if self.valid_frac[c] >= 0.5 {
                moving.0 += self.count[c];
                moving.1 += 1;
            } else if self.valid_frac[c] == 0.0 && self.count[c] > 0.0 {
                stat.0 += self.count[c];
                stat.1 += 1;
            }
        }
        if moving.1 == 0 || stat.1 == 0 || stat.0 == 0.0 {
            return None;
        }
        Some((moving.0 / moving.1 as f64) / (stat.0 / stat.1 as f64))
    }
}

/// Per-splat inputs to pruning.
pub struct PruneInput<'a> {
    /// Peak temporal opacity, sigmoid(base logit).
    pub max_opacity: &'a [f64],
    /// Accumulated compositing contribution.
    pub contribution: &'a [f64],
    /// Motion strength at the splat's projection.
    pub strength: &'a [f64],
    pub consistency_ok: &'a [bool],
}

/// Keep-mask: drops splats under the opacity floor, then (if over budget)
/// drops the lowest flow-weighted contributors. Consistent splats in strong
/// motion (W > 0.8) are protected from budget pruning.
pub fn select_prune(input: &PruneInput, opacity_floor: f64, gamma: f64, budget: usize) -> Vec<bool> {
    let n = input.max_opacity.len();
    let mut keep = vec![true; n];
    let mut alive = 0usize;
    for i in 0..n {
        if input.max_opacity[i] < opacity_floor {
            keep[i] = false;
        } else {
            alive += 1;
        }
    }
    if alive > budget {
        let mut candidates: Vec<(usize, f64)> = (0..n)
            .filter(|&i| keep[i] && !(input.consistency_ok[i] && input.strength[i] > 0.8))
            .map(|i| {
                (
                    i,
                    flow_weighted_contribution(input.contribution[i], input.strength[i], gamma),
                )
            })
            .collect();
        candidates.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
        let mut excess = alive - budget;
        for (i, _) in candidates {
            if excess == 0 {
                break;
            }
            keep[i] = false;
            excess -= 1;
        }
    }
    keep
}

/// Blends the estimated flow toward the splat-trajectory flow.
pub fn refine_flow(estimated: Vec2, trajectory: Vec2, beta: f64) -> Vec2 {
    estimated * (1.0 - beta) + trajectory * beta
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::rngs::StdRng;
    use rand::SeedableRng;

    #[test]
    fn dynamic_mask_thresholds_mean_channel_error() {
        let mut render = Image::zeros(2, 1, 3);
        let gt = Image::zeros(2, 1, 3);
        // Mean-channel error exactly at the threshold is not dynamic.
        render.set(0, 0, 0, 0.15);
        // Above it is.
        render.set(1, 0, 0, 0.16);
        let mask = detect_dynamic(&render, &gt, 0.05).unwrap();
        assert!(!mask.get(0, 0));
        assert!(mask.get(1, 0));
        let bad = Image::zeros(3, 1, 3);
        assert!(detect_dynamic(&render, &bad, 0.05).is_err());
    }

    #[test]
    fn accumulated_motion_defines_valid_region_and_strength() {
        let mut f = FlowField::zeros(2, 1);
        f.set(0, 0, Vec2::new(0.3, 0.4)); // magnitude 0.5
        let flows = vec![&f, &f, &f, &f, &f];
        let stats = motion_stats(&flows, 1.5).unwrap();
        assert_relative_eq!(stats.accumulated[0], 2.5, epsilon = 1e-12);
        assert!(stats.valid.get(0, 0));
        assert!(!stats.valid.get(1, 0));
        assert_relative_eq!(stats.strength[0], 2.5 / 3.0, epsilon = 1e-12);
        assert_eq!(stats.strength[1], 0.0);
        // Saturates at 1.
        let strong = motion_stats(&flows, 0.5).unwrap();
        assert_eq!(strong.strength[0], 1.0);
    }

    fn plain_seed() -> SpacetimeGaussian {
        SpacetimeGaussian {
            canonical_pos: Vec3::new(0.2, -0.1, 2.0),
            motion_coeffs: vec![Vec3::new(0.5, 0.2, -0.1), Vec3::zeros()],
            temporal_center_pos: 0.1,
            rot_coeffs: vec![Vec4::new(1.0, 0.0, 0.0, 0.0), Vec4::zeros()],
            temporal_center_rot: 0.1,
            log_scales: Vec3::new(-2.0, -2.0, -2.0),
            base_opacity: 0.5,
            temporal_sharpness: 0.3,
            appearance_feat: vec![0.1, 0.2],
        }
    }

    #[test]
    fn flow_sampling_offsets_exactly_along_lifted_direction() {
        let cam = Camera::new(64, 64, 100.0, 100.0, 32.0, 32.0, Mat4::identity());
        let seed = plain_seed();
        let t = 0.6;
        let seed_world = seed.canonical_pos + seed.motion_offset(t);
        let ctx = SampleContext {
            camera: &cam,
            lbs_jacobian: Mat3::identity(),
            seed_world,
        };
        let mut cfg = DensifyConfig::default();
        cfg.lateral_spread = 0.0;
        let mut rng = StdRng::seed_from_u64(1);
        let flow = Vec2::new(3.0, -4.0);
        let new = sample_along_flow(&seed, &ctx, flow, t, &cfg, &mut rng).unwrap();
        assert_eq!(new.temporal_center_pos, t);
        assert_eq!(new.temporal_center_rot, t);
        // New splat's posed position at t (its motion offset vanishes there).
        let new_world = new.canonical_pos + new.motion_offset(t);
        let offset = new_world - seed_world;
        assert_relative_eq!(offset.norm(), cfg.step_length, epsilon = 1e-12);
        let dir = Vec3::new(3.0 / 5.0, -4.0 / 5.0, 0.0);
        assert_relative_eq!(offset / offset.norm(), dir, epsilon = 1e-12);
        // Everything else clones.
        assert_eq!(new.log_scales, seed.log_scales);
        assert_eq!(new.appearance_feat, seed.appearance_feat);
    }

    #[test]
    fn flow_sampling_rejects_negligible_flow() {
        let cam = Camera::new(64, 64, 100.0, 100.0, 32.0, 32.0, Mat4::identity());
        let seed = plain_seed();
        let ctx = SampleContext {
            camera: &cam,
            lbs_jacobian: Mat3::identity(),
            seed_world: Vec3::new(0.0, 0.0, 2.0),
        };
        let cfg = DensifyConfig::default();
        let mut rng = StdRng::seed_from_u64(2);
        assert!(sample_along_flow(&seed, &ctx, Vec2::new(1e-7, 0.0), 0.5, &cfg, &mut rng).is_none());
    }

    #[test]
    fn flow_sampling_inverts_skinning_rotation() {
        let cam = Camera::new(64, 64, 100.0, 100.0, 32.0, 32.0, Mat4::identity());
        let mut seed = plain_seed();
        seed.motion_coeffs = vec![Vec3::zeros(), Vec3::zeros()];
        let rot = quat_to_matrix(quat_from_axis_angle(Vec3::z(), 0.7));
        let seed_world = rot * seed.canonical_pos;
        let ctx = SampleContext {
            camera: &cam,
            lbs_jacobian: rot,
            seed_world,
        };
        let mut cfg = DensifyConfig::default();
        cfg.lateral_spread = 0.0;
        let mut rng = StdRng::seed_from_u64(3);
        let new = sample_along_flow(&seed, &ctx, Vec2::new(0.0, 2.0), 0.4, &cfg, &mut rng).unwrap();
        // Skinning the new canonical position must land seed + world offset.
        let new_world = rot * new.canonical_pos;
        let offset = new_world - seed_world;
        assert_relative_eq!(offset.norm(), cfg.step_length, epsilon = 1e-12);
        assert_relative_eq!(offset.y / offset.norm(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn consistency_error_tracks_flow_integration() {
        let mut f = FlowField::zeros(8, 8);
        for y in 0..8 {
            for x in 0..8 {
                f.set(x, y, Vec2::new(2.0, 1.0));
            }
        }
        let prev = Vec2::new(2.5, 3.5);
        let cur = prev + Vec2::new(2.0, 1.0);
        assert_relative_eq!(consistency_error(prev, cur, &f), 0.0, epsilon = 1e-12);
        let off = cur + Vec2::new(3.0, 0.0);
        assert_relative_eq!(consistency_error(prev, off, &f), 3.0, epsilon = 1e-12);
    }

    #[test]
    fn contribution_is_flow_weighted() {
        assert_relative_eq!(flow_weighted_contribution(2.0, 1.0, 0.5), 3.0);
        assert_relative_eq!(flow_weighted_contribution(2.0, 0.0, 0.5), 2.0);
    }

    fn stats_with_valid_box(w: usize, h: usize, x0: usize, x1: usize) -> MotionStats {
        let mut f = FlowField::zeros(w, h);
        for y in 0..h {
            for x in x0..x1 {
                f.set(x, y, Vec2::new(5.0, 0.0));
            }
        }
        motion_stats(&[&f], 2.0).unwrap()
    }

    #[test]
    fn density_report_targets_scale_with_motion() {
        let cfg = DensifyConfig {
            cell_size: 4,
            ..DensifyConfig::default()
        };
        // 8x4 image: left cell static, right cell fully moving.
        let stats = stats_with_valid_box(8, 4, 4, 8);
        // Three splats in the static cell, one in the moving cell.
        let px = vec![
            Some(Vec2::new(1.0, 1.0)),
            Some(Vec2::new(2.0, 2.0)),
            Some(Vec2::new(3.0, 1.0)),
            Some(Vec2::new(6.0, 2.0)),
            None,
            Some(Vec2::new(-3.0, 1.0)), // off-screen: ignored
        ];
        let report = density_report(&px, &stats, &cfg);
        assert_eq!((report.cells_x, report.cells_y), (2, 1));
        assert_eq!(report.count, vec![3.0, 1.0]);
        // Median of {3, 1} (upper median) is 3.
        assert_eq!(report.base, 3.0);
        assert_eq!(report.strength[0], 0.0);
        assert_eq!(report.strength[1], 1.0);
        assert_relative_eq!(report.target[0], 3.0);
        assert_relative_eq!(report.target[1], 6.0);
        let deficits = report.deficit_cells();
        assert_eq!(deficits.len(), 1);
        assert_eq!(deficits[0].0, 1);
        assert_relative_eq!(deficits[0].2, 5.0);
        assert_relative_eq!(report.moving_static_ratio().unwrap(), 1.0 / 3.0, epsilon = 1e-12);
    }

    #[test]
    fn prune_floor_overrides_protection() {
        let input = PruneInput {
            max_opacity: &[0.001, 0.9, 0.9, 0.9],
            contribution: &[100.0, 1.0, 2.0, 3.0],
            strength: &[1.0, 1.0, 0.0, 0.0],
            consistency_ok: &[true, true, true, true],
        };
        // Splat 0 dies to the floor despite protection-worthy stats.
        let keep = select_prune(&input, 0.005, 0.5, 10);
        assert_eq!(keep, vec![false, true, true, true]);
        // Over budget: splat 1 is protected (ok && W>0.8), so 2 goes first.
        let keep = select_prune(&input, 0.005, 0.5, 2);
        assert_eq!(keep, vec![false, true, false, true]);
    }

    #[test]
    fn refine_blends_toward_trajectory() {
        let v = refine_flow(Vec2::new(1.0, 0.0), Vec2::new(0.0, 1.0), 0.3);
        assert_relative_eq!(v, Vec2::new(0.7, 0.3), epsilon = 1e-12);
    }
}
