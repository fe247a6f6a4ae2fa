//! Synthetic monocular sequences of an articulated stick figure. Surface
//! points ride capsules around the bones, swing through a scripted walk under
//! a slowly orbiting camera, breathe with a non-rigid radial bulge, and shade
//! with a fixed Lambertian light so appearance depends on pose. Ground-truth
//! frames come from the splat renderer itself; flow is exact point motion
//! rasterized with a z-buffer.

use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::camera::{Camera, NEAR_CLIP};
use crate::error::Result;
use crate::flowdens::FlowField;
use crate::gauss::PosedGaussian;

use crate::io::dataset::{write_dataset, DatasetMeta, DATASET_VERSION};
use crate::io::png::save_png;
use crate::math::*;
use crate::render::{project, render, RenderOptions};
use crate::skeleton::{
    assign_skinning_weights, lbs_rotation, lbs_transform, Bone, BoneWeights, Pose, Skeleton,
    DEFAULT_WEIGHT_SHARPNESS, MAX_INFLUENCES,
};

#[derive(Debug, Clone)]
pub enum MotionScript {
    /// Walk-and-wave animation under an orbiting camera.
    Walk,
    /// Fast-armed walk under a fixed camera, so only the limbs move on
    /// screen.
    WalkFixedCam,
    /// Pose, camera, and surface all frozen mid-stride.
    Static,
    /// Rest pose sliding along world x under a fixed camera.
    Translate { distance: f64 },
}

#[derive(Debug, Clone)]
pub struct SynthConfig {
    pub frames: usize,
    pub width: u32,
    pub height: u32,
    /// Approximate surface point count.
    pub points: usize,
    pub seed: u64,
    pub script: MotionScript,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            frames: 24,
            width: 64,
            height: 64,
            points: 2400,
            seed: 0,
            script: MotionScript::Walk,
        }
    }
}

pub const BACKGROUND: [f64; 3] = [0.10, 0.11, 0.13];

const LIGHT_DIR: Vec3 = Vec3::new(0.5, 0.8, -0.35);
const AMBIENT: f64 = 0.55;
const DIFFUSE: f64 = 0.45;

/// Eleven bones: pelvis root, torso, head, and two-segment arms and legs.
pub fn figure_skeleton() -> Skeleton {
    let t = |x: f64, y: f64, z: f64| compose_rt(&Mat3::identity(), Vec3::new(x, y, z));
    let bone = |name: &str, parent: Option<usize>, rest: Mat4| Bone {
        name: name.to_string(),
        parent,
        local_rest: rest,
    };
    Skeleton::new(vec![
        bone("root", None, t(0.0, 0.0, 0.0)),
        bone("torso", Some(0), t(0.0, 0.10, 0.0)),
        bone("head", Some(1), t(0.0, 0.35, 0.0)),
        bone("l_up_arm", Some(1), t(-0.18, 0.30, 0.0)),
        bone("l_lo_arm", Some(3), t(-0.25, 0.0, 0.0)),
        bone("r_up_arm", Some(1), t(0.18, 0.30, 0.0)),
        bone("r_lo_arm", Some(5), t(0.25, 0.0, 0.0)),
        bone("l_up_leg", Some(0), t(-0.10, -0.03, 0.0)),
        bone("l_lo_leg", Some(7), t(0.0, -0.35, 0.0)),
        bone("r_up_leg", Some(0), t(0.10, -0.03, 0.0)),
        bone("r_lo_leg", Some(9), t(0.0, -0.35, 0.0)),
    ])
    .expect("figure skeleton is valid")
}

fn capsule_radius(bone: usize) -> f64 {
    match bone {
        0 => 0.085,
        1 => 0.080,
        2 => 0.060,
        3 | 5 => 0.032,
        4 | 6 => 0.026,
        _ => 0.042,
    }
}

fn base_albedo(bone: usize) -> [f64; 3] {
    match bone {
        0 => [0.62, 0.32, 0.22],
        1 => [0.25, 0.45, 0.70],
        2 => [0.82, 0.66, 0.50],
        3 | 5 => [0.30, 0.62, 0.35],
        4 | 6 => [0.72, 0.68, 0.28],
        _ => [0.45, 0.30, 0.58],
    }
}

fn bulge_amplitude(bone: usize) -> f64 {
    match bone {
        0 | 1 => 0.032,
        2 => 0.020,
        _ => 0.013,
    }
}

/// A surface sample in rest space: anchor on a bone segment plus an outward
/// radial direction, with texture coordinates baked into the albedo.
#[derive(Debug, Clone)]
pub struct SurfacePoint {
    pub rest_pos: Vec3,
    pub rest_radial: Vec3,
    pub bone: usize,
    pub axial: f64,
    pub albedo: [f64; 3],
    pub bulge_phase: f64,
    pub bulge_amp: f64,
}

/// Samples points uniformly over the capsule areas of every bone segment.
pub fn sample_surface(skel: &Skeleton, target: usize, rng: &mut impl Rng) -> Vec<SurfacePoint> {
    struct Seg {
        bone: usize,
        a: Vec3,
        b: Vec3,
        area: f64,
    }
    let mut segs = Vec::new();
    let mut total_area = 0.0;
    for b in 0..skel.bone_count() {
        for (a, bb) in skel.bone_segments(b) {
            let len = (bb - a).norm();
            if len < 1e-9 {
                continue;
            }
            let area = len * capsule_radius(b);
            total_area += area;
            segs.push(Seg { bone: b, a, b: bb, area });
        }
    }
    let mut points = Vec::with_capacity(target);
    for seg in &segs {
        let n = ((target as f64 * seg.area / total_area).round() as usize).max(4);
        let axis = (seg.b - seg.a).normalize();
        // Any stable frame perpendicular to the axis.
        let helper = if axis.x.abs() < 0.9 { Vec3::x() } else { Vec3::y() };
        let n1 = axis.cross(&helper).normalize();
        let n2 = axis.cross(&n1);
        let radius = capsule_radius(seg.bone);
        for _ in 0..n {
            let u: f64 = rng.random_range(0.0..1.0);
            let theta: f64 = rng.random_range(0.0..std::f64::consts::TAU);
            let radial = n1 * theta.cos() + n2 * theta.sin();
            let base = base_albedo(seg.bone);
            // Checker texture: axial bands (~0.08 world units each) crossed
            // with two angular sectors, alternating bright and dark squares.
            let bands = ((seg.b - seg.a).norm() / 0.08).round().clamp(2.0, 6.0);
            let band = (u * bands).floor() as i64;
            let sector = (theta / std::f64::consts::PI).floor() as i64;
            let checker = if (band + sector) % 2 == 0 { 1.0 } else { 0.55 };
            let albedo = [
                (base[0] * checker).clamp(0.02, 0.98),
                (base[1] * checker).clamp(0.02, 0.98),
                (base[2] * checker).clamp(0.02, 0.98),
            ];
            points.push(SurfacePoint {
                rest_pos: seg.a + axis * (u * (seg.b - seg.a).norm()) + radial * radius,
                rest_radial: radial,
                bone: seg.bone,
                axial: u,
                albedo,
                bulge_phase: std::f64::consts::PI * u + seg.bone as f64 * 1.3,
                bulge_amp: bulge_amplitude(seg.bone),
            });
        }
    }
    points
}

/// The scripted walk-and-wave: swings arms and legs in opposite phase, nods
/// the head, twists the torso, and sways the root.
pub fn scripted_pose(skel: &Skeleton, t: f64) -> Pose {
    walk_pose(skel, t, 1.0, 0.85, 0.45)
}

/// Walk variant with the arm swing sped up and widened; the torso, head, and
/// legs keep the base gait.
pub fn scripted_pose_fast_arms(skel: &Skeleton, t: f64) -> Pose {
    walk_pose(skel, t, 2.0, 0.95, 0.55)
}

fn walk_pose(skel: &Skeleton, t: f64, arm_rate: f64, arm_amp: f64, elbow_amp: f64) -> Pose {
    let tau = std::f64::consts::TAU;
    let mut pose = Pose::rest(skel.bone_count());
    let swing = (tau * t).sin();
    let swing_lag = (tau * t + 0.7).sin();
    let arm_swing = (arm_rate * tau * t).sin();
    let arm_swing_lag = (arm_rate * tau * t + 0.7).sin();
    let rot = |axis: Vec3, angle: f64| {
        let q = quat_from_axis_angle(axis, angle);
        [q[0], q[1], q[2], q[3]]
    };
    pose.rotations[1] = rot(Vec3::y(), 0.10 * swing);
    pose.rotations[2] = rot(Vec3::x(), 0.15 * (2.0 * tau * t).sin());
    pose.rotations[3] = rot(Vec3::z(), arm_amp * arm_swing);
    pose.rotations[4] = rot(Vec3::z(), elbow_amp * arm_swing_lag);
    pose.rotations[5] = rot(Vec3::z(), -arm_amp * arm_swing);
    pose.rotations[6] = rot(Vec3::z(), -elbow_amp * arm_swing_lag);
    pose.rotations[7] = rot(Vec3::x(), 0.35 * swing);
    pose.rotations[8] = rot(Vec3::x(), 0.25 * swing_lag.max(0.0));
    pose.rotations[9] = rot(Vec3::x(), -0.35 * swing);
    pose.rotations[10] = rot(Vec3::x(), 0.25 * (-swing_lag).max(0.0));
    pose.root_translation = [0.03 * swing, 0.012 * (2.0 * tau * t).sin(), 0.0];
    pose
}

/// Sixty-degree orbit at fixed elevation, always framing the figure.
pub fn orbit_camera(width: u32, height: u32, t: f64) -> Camera {
    let angle = (-30.0 + 60.0 * t).to_radians();
    let center = Vec3::new(0.0, 0.12, 0.0);
    let eye = center + Vec3::new(2.3 * angle.sin(), 0.35, 2.3 * angle.cos());
    Camera::look_at(width, height, 0.82, eye, center, Vec3::y())
}

/// World position, outward normal, and shaded color of one point at time t.
pub fn posed_point(
    p: &SurfacePoint,
    weights: &BoneWeights,
    bts: &[Mat4],
    t: f64,
) -> (Vec3, [f64; 3]) {
    let skinned = lbs_transform(p.rest_pos, weights, bts);
    let rot = lbs_rotation(weights, bts);
    let normal_raw = rot * p.rest_radial;
    let norm = normal_raw.norm();
    let normal = if norm > 1e-12 { normal_raw / norm } else { p.rest_radial };
    let bulge = p.bulge_amp * (std::f64::consts::TAU * t + p.bulge_phase).sin();
    let position = skinned + normal * bulge;
    let light = LIGHT_DIR.normalize();
    let lambert = AMBIENT + DIFFUSE * normal.dot(&light).max(0.0);
    let color = [
        (p.albedo[0] * lambert).min(1.0),
        (p.albedo[1] * lambert).min(1.0),
        (p.albedo[2] * lambert).min(1.0),
    ];
    (position, color)
}

fn point_world_sigma(cam: &Camera, depth: f64) -> f64 {
    // Roughly 1.3 pixels of footprint at the figure's depth.
    1.3 * depth / cam.fx
}

/// Rasterizes exact point motion into a flow field on the earlier frame's
/// pixel grid. Each point stamps a small disc; depth buffering keeps the
/// nearest surface.
fn rasterize_flow(
    prev_px: &[Option<(Vec2, f64)>],
    cur_px: &[Option<Vec2>],
    width: usize,
    height: usize,
) -> FlowField {
    let mut flow = FlowField::zeros(width, height);
    let mut zbuf = vec![f64::INFINITY; width * height];
    let stamp = 1.25;
    for (prev, cur) in prev_px.iter().zip(cur_px) {
        let (Some((q0, z0)), Some(q1)) = (prev, cur) else {
            continue;
        };
        let v = q1 - q0;
        let x0 = ((q0.x - stamp).floor().max(0.0)) as usize;
        let y0 = ((q0.y - stamp).floor().max(0.0)) as usize;
        let x1 = ((q0.x + stamp).ceil().min(width as f64 - 1.0)).max(0.0) as usize;
        let y1 = ((q0.y + stamp).ceil().min(height as f64 - 1.0)).max(0.0) as usize;
        if q0.x + stamp < 0.0 || q0.y + stamp < 0.0 {
            continue;
        }
        for py in y0..=y1 {
            for px in x0..=x1 {
                let c = Vec2::new(px as f64 + 0.5, py as f64 + 0.5);
                if (c - q0).norm() > stamp {
                    continue;
                }
                let i = py * width + px;
                if *z0 < zbuf[i] {
                    zbuf[i] = *z0;
                    flow.set(px, py, v);
                }
            }
        }
    }
    flow
}

/// Generates and writes a full dataset; returns the meta record.
pub fn generate(dir: &Path, cfg: &SynthConfig) -> Result<DatasetMeta> {
    let skel = figure_skeleton();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let points = sample_surface(&skel, cfg.points, &mut rng);
    let rests: Vec<Vec3> = points.iter().map(|p| p.rest_pos).collect();
    let skinning = assign_skinning_weights(&rests, &skel, MAX_INFLUENCES, DEFAULT_WEIGHT_SHARPNESS);

    let n = cfg.frames;
    let mut cameras = Vec::with_capacity(n);
    let mut poses = Vec::with_capacity(n);
    let mut frames = Vec::with_capacity(n);
    let mut all_px: Vec<Vec<Option<(Vec2, f64)>>> = Vec::with_capacity(n);

    for k in 0..n {
        let t = k as f64 / (n - 1) as f64;
        let (cam, pose, motion_t) = match &cfg.script {
            MotionScript::Walk => (
                orbit_camera(cfg.width, cfg.height, t),
                scripted_pose(&skel, t),
                t,
            ),
            MotionScript::WalkFixedCam => (
                orbit_camera(cfg.width, cfg.height, 0.5),
                scripted_pose_fast_arms(&skel, t),
                t,
            ),
            MotionScript::Static => (
                orbit_camera(cfg.width, cfg.height, 0.3),
                scripted_pose(&skel, 0.3),
                0.3,
            ),
            MotionScript::Translate { distance } => {
                let mut pose = Pose::rest(skel.bone_count());
                pose.root_translation = [distance * (t - 0.5), 0.0, 0.0];
                (orbit_camera(cfg.width, cfg.height, 0.5), pose, 0.0)
            }
        };
        let bts = skel.forward_kinematics(&pose)?;

        let mut posed = Vec::with_capacity(points.len());
        let mut colors = Vec::with_capacity(points.len());
        let mut px = Vec::with_capacity(points.len());
        for (p, w) in points.iter().zip(&skinning) {
            let (position, color) = posed_point(p, w, &bts, motion_t);
            let (q, depth) = cam.project(position);
            px.push((depth > NEAR_CLIP).then_some((q, depth)));
            let sigma = point_world_sigma(&cam, depth.max(0.5));
            posed.push(PosedGaussian {
                position,
                covariance: Mat3::identity() * sigma * sigma,
                opacity: 0.95,
                appearance: vec![],
            });
            colors.push(color);
        }

        let splats: Vec<_> = posed
            .iter()
            .zip(&colors)
            .enumerate()
            .filter_map(|(i, (p, &c))| project(p, c, &cam, i as u32))
            .collect();
        let out = render(&splats, &cam, BACKGROUND, &RenderOptions::default());
        frames.push(out.image);
        cameras.push(cam);
        poses.push(pose);
        all_px.push(px);
    }

    let mut flows = Vec::with_capacity(n - 1);
    for k in 1..n {
        let prev = &all_px[k - 1];
        let cur: Vec<Option<Vec2>> = all_px[k].iter().map(|p| p.map(|(q, _)| q)).collect();
        flows.push(rasterize_flow(prev, &cur, cfg.width as usize, cfg.height as usize));
    }

    let meta = DatasetMeta {
        version: DATASET_VERSION,
        frame_count: n,
        width: cfg.width,
        height: cfg.height,
        seed: cfg.seed,
        background: BACKGROUND,
    };
    write_dataset(dir, &meta, &skel, &cameras, &poses, &frames, &flows)?;

    let png_dir = dir.join("frames");
    std::fs::create_dir_all(&png_dir).map_err(|e| crate::error::Error::io(&png_dir, e))?;
    for (k, img) in frames.iter().enumerate() {
        save_png(&png_dir.join(format!("{k:04}.png")), img)?;
    }
    Ok(meta)
}
