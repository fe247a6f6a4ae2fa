use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::gauss::SpacetimeGaussian;
use crate::math::*;
use crate::skeleton::Pose;

/// Frequency counts for the positional encodings and the width of the learned
/// motion feature.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct EncodingConfig {
    pub l_pos: usize,
    pub l_view: usize,
    pub l_pose: usize,
    pub motion_feat: usize,
}

impl Default for EncodingConfig {
    fn default() -> Self {
        EncodingConfig {
            l_pos: 6,
            l_view: 4,
            l_pose: 2,
            motion_feat: 8,
        }
    }
}

/// Appends [sin(2^0 π x), cos(2^0 π x), ..., sin(2^{L-1} π x), cos(2^{L-1} π x)]
/// for each component of `x`.
pub fn positional_encoding(x: &[f64], l: usize, out: &mut Vec<f64>) {
    for &v in x {
        let mut f = std::f64::consts::PI;
        for _ in 0..l {
            let (s, c) = (f * v).sin_cos();
            out.push(s);
            out.push(c);
            f *= 2.0;
        }
    }
}

pub fn encoded_len(dim: usize, l: usize) -> usize {
    dim * 2 * l
}

/// Accumulates dL/dx given upstream gradients on the encoded block.
pub fn positional_encoding_backward(x: &[f64], l: usize, d_enc: &[f64], d_x: &mut [f64]) {
    debug_assert_eq!(d_enc.len(), encoded_len(x.len(), l));
    let mut k = 0;
    for (i, &v) in x.iter().enumerate() {
        let mut f = std::f64::consts::PI;
        for _ in 0..l {
            let (s, c) = (f * v).sin_cos();
            d_x[i] += d_enc[k] * f * c - d_enc[k + 1] * f * s;
            k += 2;
            f *= 2.0;
        }
    }
}

/// Dense layer, weights row-major `[out][in]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub in_dim: usize,
    pub out_dim: usize,
    pub w: Vec<f64>,
    pub b: Vec<f64>,
}

impl Linear {
    pub fn new(in_dim: usize, out_dim: usize, rng: &mut impl Rng) -> Linear {
        // Kaiming-uniform fan-in scaling.
        let a = (6.0 / in_dim as f64).sqrt();
        Linear {
            in_dim,
            out_dim,
            w: (0..in_dim * out_dim).map(|_| rng.random_range(-a..a)).collect(),
            b: vec![0.0; out_dim],
        }
    }

    pub fn forward(&self, x: &[f64], out: &mut [f64]) {
        debug_assert_eq!(x.len(), self.in_dim);
        debug_assert_eq!(out.len(), self.out_dim);
        for (o, out_v) in out.iter_mut().enumerate() {
            let row = &self.w[o * self.in_dim..(o + 1) * self.in_dim];
            let mut acc = self.b[o];
            for (wi, xi) in row.iter().zip(x) {
                acc += wi * xi;
            }
            *out_v = acc;
        }
    }

    /// Accumulates weight/bias gradients and (optionally) input gradients.
    pub fn backward(&self, x: &[f64], d_out: &[f64], d_x: Option<&mut [f64]>, grad: &mut LinearGrad) {
        for (o, &g) in d_out.iter().enumerate() {
            grad.b[o] += g;
            let row = &mut grad.w[o * self.in_dim..(o + 1) * self.in_dim];
            for (wi, xi) in row.iter_mut().zip(x) {
                *wi += g * xi;
            }
        }
        if let Some(d_x) = d_x {
            for (o, &g) in d_out.iter().enumerate() {
                let row = &self.w[o * self.in_dim..(o + 1) * self.in_dim];
                for (dxi, wi) in d_x.iter_mut().zip(row) {
                    *dxi += g * wi;
                }
            }
        }
    }

    pub fn param_count(&self) -> usize {
        self.w.len() + self.b.len()
    }
}

#[derive(Debug, Clone)]
pub struct LinearGrad {
    pub w: Vec<f64>,
    pub b: Vec<f64>,
}

impl LinearGrad {
    pub fn zeros_like(l: &Linear) -> LinearGrad {
        LinearGrad {
            w: vec![0.0; l.w.len()],
            b: vec![0.0; l.b.len()],
        }
    }

    pub fn add_assign(&mut self, other: &LinearGrad) {
        for (a, b) in self.w.iter_mut().zip(&other.w) {
            *a += b;
        }
        for (a, b) in self.b.iter_mut().zip(&other.b) {
            *a += b;
        }
    }
}

/// View- and pose-conditioned color head: a linear projection of the motion
/// polynomial coefficients plus a 3-layer ReLU MLP with sigmoid output.
///
/// Input layout: [γ(position) | motion feature | appearance feature |
/// γ(pose rotations) | γ(view direction)].
#[derive(Debug, Clone, PartialEq)]
pub struct ColorMlp {
    pub motion_proj: Linear,
    pub l1: Linear,
    pub l2: Linear,
    pub l3: Linear,
}

impl ColorMlp {
    pub fn motion_input_dim(n_p: usize, n_q: usize) -> usize {
        3 * n_p + 4 * (n_q + 1)
    }

    pub fn input_dim(enc: &EncodingConfig, feat_dim: usize, bone_count: usize) -> usize {
        encoded_len(3, enc.l_pos)
            + enc.motion_feat
            + feat_dim
            + encoded_len(4 * bone_count, enc.l_pose)
            + encoded_len(3, enc.l_view)
    }

    pub fn new(
        enc: &EncodingConfig,
        n_p: usize,
        n_q: usize,
        feat_dim: usize,
        bone_count: usize,
        hidden: usize,
        rng: &mut impl Rng,
    ) -> ColorMlp {
        let input = Self::input_dim(enc, feat_dim, bone_count);
        ColorMlp {
            motion_proj: Linear::new(Self::motion_input_dim(n_p, n_q), enc.motion_feat, rng),
            l1: Linear::new(input, hidden, rng),
            l2: Linear::new(hidden, hidden, rng),
            l3: Linear::new(hidden, 3, rng),
        }
    }

    pub fn hidden_dim(&self) -> usize {
        self.l1.out_dim
    }

    pub fn param_count(&self) -> usize {
        self.motion_proj.param_count() + self.l1.param_count() + self.l2.param_count() + self.l3.param_count()
    }

    /// Widths of the value chain: input, hidden, hidden, 3.
    pub fn layer_sizes(&self) -> Vec<u32> {
        vec![self.l1.in_dim as u32, self.l1.out_dim as u32, self.l2.out_dim as u32, 3]
    }
}

#[derive(Debug, Clone)]
pub struct MlpGrad {
    pub motion_proj: LinearGrad,
    pub l1: LinearGrad,
    pub l2: LinearGrad,
    pub l3: LinearGrad,
}

impl MlpGrad {
    pub fn zeros_like(mlp: &ColorMlp) -> MlpGrad {
        MlpGrad {
            motion_proj: LinearGrad::zeros_like(&mlp.motion_proj),
            l1: LinearGrad::zeros_like(&mlp.l1),
            l2: LinearGrad::zeros_like(&mlp.l2),
            l3: LinearGrad::zeros_like(&mlp.l3),
        }
    }

    pub fn add_assign(&mut self, other: &MlpGrad) {
        self.motion_proj.add_assign(&other.motion_proj);
        self.l1.add_assign(&other.l1);
        self.l2.add_assign(&other.l2);
        self.l3.add_assign(&other.l3);
    }
}

/// Flattened motion/rotation coefficients, the raw input of the motion
/// feature projection.
pub fn motion_input(g: &SpacetimeGaussian) -> Vec<f64> {
    let mut v = Vec::with_capacity(3 * g.motion_coeffs.len() + 4 * g.rot_coeffs.len());
    for b in &g.motion_coeffs {
        v.extend_from_slice(b.as_slice());
    }
    for c in &g.rot_coeffs {
        v.extend_from_slice(c.as_slice());
    }
    v
}

/// Adjoint of `motion_input`: scatters a flat gradient back onto the motion
/// and rotation coefficients.
pub fn motion_input_backward(d: &[f64], grad: &mut crate::gauss::GaussianGrad) {
    debug_assert_eq!(d.len(), 3 * grad.motion_coeffs.len() + 4 * grad.rot_coeffs.len());
    let mut i = 0;
    for b in grad.motion_coeffs.iter_mut() {
        for k in 0..3 {
            b[k] += d[i];
            i += 1;
        }
    }
    for c in grad.rot_coeffs.iter_mut() {
        for k in 0..4 {
            c[k] += d[i];
            i += 1;
        }
    }
}

/// Positional encoding of all pose rotations, shared by every splat in a frame.
pub fn encode_pose(pose: &Pose, l: usize) -> Vec<f64> {
    let flat: Vec<f64> = pose.rotations.iter().flatten().copied().collect();
    let mut out = Vec::with_capacity(encoded_len(flat.len(), l));
    positional_encoding(&flat, l, &mut out);
    out
}

/// Saved activations for the backward pass of one splat's color.
#[derive(Debug, Clone)]
pub struct ColorCache {
    position: Vec3,
    motion_raw: Vec<f64>,
    feat_offset: usize,
    feat_len: usize,
    input: Vec<f64>,
    h1: Vec<f64>,
    h2: Vec<f64>,
    rgb: [f64; 3],
}

/// RGB in [0,1] for one splat.
pub fn color_forward(
    mlp: &ColorMlp,
    enc: &EncodingConfig,
    position: Vec3,
    motion_raw: &[f64],
    feat: &[f64],
    pose_enc: &[f64],
    view_dir: Vec3,
) -> ([f64; 3], ColorCache) {
    let mut input = Vec::with_capacity(mlp.l1.in_dim);
    positional_encoding(position.as_slice(), enc.l_pos, &mut input);
    let mut motion_feat = vec![0.0; mlp.motion_proj.out_dim];
    mlp.motion_proj.forward(motion_raw, &mut motion_feat);
    input.extend_from_slice(&motion_feat);
    let feat_offset = input.len();
    input.extend_from_slice(feat);
    input.extend_from_slice(pose_enc);
    positional_encoding(view_dir.as_slice(), enc.l_view, &mut input);
    debug_assert_eq!(input.len(), mlp.l1.in_dim);

    let mut h1 = vec![0.0; mlp.l1.out_dim];
    mlp.l1.forward(&input, &mut h1);
    for v in &mut h1 {
        *v = v.max(0.0);
    }
    let mut h2 = vec![0.0; mlp.l2.out_dim];
    mlp.l2.forward(&h1, &mut h2);
    for v in &mut h2 {
        *v = v.max(0.0);
    }
    let mut out = [0.0; 3];
    mlp.l3.forward(&h2, &mut out);
    let rgb = [sigmoid(out[0]), sigmoid(out[1]), sigmoid(out[2])];
    (
        rgb,
        ColorCache {
            position,
            motion_raw: motion_raw.to_vec(),
            feat_offset,
            feat_len: feat.len(),
            input,
            h1,
            h2,
            rgb,
        },
    )
}

/// Input gradients of `color_forward`. Pose and view-direction encodings are
/// data, not parameters, so their gradients are dropped.
#[derive(Debug, Clone)]
pub struct ColorInputGrad {
    pub position: Vec3,
    pub motion_raw: Vec<f64>,
    pub feat: Vec<f64>,
}

pub fn color_backward(
    mlp: &ColorMlp,
    enc: &EncodingConfig,
    cache: &ColorCache,
    d_rgb: [f64; 3],
    grads: &mut MlpGrad,
) -> ColorInputGrad {
    let mut d_out = [0.0; 3];
    for c in 0..3 {
        d_out[c] = d_rgb[c] * cache.rgb[c] * (1.0 - cache.rgb[c]);
    }
    let mut d_h2 = vec![0.0; mlp.l2.out_dim];
    mlp.l3.backward(&cache.h2, &d_out, Some(&mut d_h2), &mut grads.l3);
    for (d, h) in d_h2.iter_mut().zip(&cache.h2) {
        if *h <= 0.0 {
            *d = 0.0;
        }
    }
    let mut d_h1 = vec![0.0; mlp.l1.out_dim];
    mlp.l2.backward(&cache.h1, &d_h2, Some(&mut d_h1), &mut grads.l2);
    for (d, h) in d_h1.iter_mut().zip(&cache.h1) {
        if *h <= 0.0 {
            *d = 0.0;
        }
    }
    let mut d_input = vec![0.0; mlp.l1.in_dim];
    mlp.l1.backward(&cache.input, &d_h1, Some(&mut d_input), &mut grads.l1);

    let pos_len = encoded_len(3, enc.l_pos);
    let mut d_pos = [0.0; 3];
    positional_encoding_backward(cache.position.as_slice(), enc.l_pos, &d_input[..pos_len], &mut d_pos);

    let mut d_motion_raw = vec![0.0; cache.motion_raw.len()];
    mlp.motion_proj.backward(
        &cache.motion_raw,
        &d_input[pos_len..pos_len + mlp.motion_proj.out_dim],
        Some(&mut d_motion_raw),
        &mut grads.motion_proj,
    );

    ColorInputGrad {
        position: Vec3::new(d_pos[0], d_pos[1], d_pos[2]),
        motion_raw: d_motion_raw,
        feat: d_input[cache.feat_offset..cache.feat_offset + cache.feat_len].to_vec(),
    }
}

// --- Spherical-harmonics fallback (degree 2, 9 coefficients per channel) ---

pub const SH_COEFFS: usize = 9;
const SH_C0: f64 = 0.28209479177387814;
const SH_C1: f64 = 0.4886025119029199;
const SH_C2: [f64; 5] = [
    1.0925484305920792,
    -1.0925484305920792,
    0.31539156525252005,
    -1.0925484305920792,
    0.5462742152960396,
];

pub fn sh_basis(dir: Vec3) -> [f64; SH_COEFFS] {
    let d = dir.normalize();
    let (x, y, z) = (d.x, d.y, d.z);
    [
        SH_C0,
        -SH_C1 * y,
        SH_C1 * z,
        -SH_C1 * x,
        SH_C2[0] * x * y,
        SH_C2[1] * y * z,
        SH_C2[2] * (2.0 * z * z - x * x - y * y),
        SH_C2[3] * x * z,
        SH_C2[4] * (x * x - y * y),
    ]
}

/// Coefficients are coefficient-major: `coeffs[k * 3 + channel]`, 27 values.
/// Returns the clamped color and a per-channel pass-through mask.
pub fn sh_color(coeffs: &[f64], dir: Vec3) -> ([f64; 3], [bool; 3]) {
    debug_assert_eq!(coeffs.len(), SH_COEFFS * 3);
    let basis = sh_basis(dir);
    let mut rgb = [0.0; 3];
    let mut open = [true; 3];
    for c in 0..3 {
        let mut v = 0.5;
        for (k, b) in basis.iter().enumerate() {
            v += b * coeffs[k * 3 + c];
        }
        open[c] = (0.0..=1.0).contains(&v);
        rgb[c] = v.clamp(0.0, 1.0);
    }
    (rgb, open)
}

/// dL/d(coeffs); clipped channels pass no gradient.
pub fn sh_color_backward(dir: Vec3, open: [bool; 3], d_rgb: [f64; 3], d_coeffs: &mut [f64]) {
    debug_assert_eq!(d_coeffs.len(), SH_COEFFS * 3);
    let basis = sh_basis(dir);
    for c in 0..3 {
        if !open[c] {
            continue;
        }
        for (k, b) in basis.iter().enumerate() {
            d_coeffs[k * 3 + c] += b * d_rgb[c];
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::rngs::StdRng;
    use rand::SeedableRng;

    #[test]
    fn encoding_layout_and_values() {
        let mut out = Vec::new();
        positional_encoding(&[0.5], 2, &mut out);
        assert_eq!(out.len(), 4);
        assert_relative_eq!(out[0], 1.0, epsilon = 1e-12); // sin(π/2)
        assert_relative_eq!(out[1], 0.0, epsilon = 1e-12); // cos(π/2)
        assert_relative_eq!(out[2], 0.0, epsilon = 1e-12); // sin(π)
        assert_relative_eq!(out[3], -1.0, epsilon = 1e-12); // cos(π)
        assert_eq!(encoded_len(3, 6), 36);
    }

    #[test]
    fn encoding_backward_matches_finite_differences() {
        let x = [0.3, -0.7, 1.2];
        let l = 4;
        let d_enc: Vec<f64> = (0..encoded_len(3, l)).map(|i| (i as f64 * 0.37).sin()).collect();
        let mut d_x = [0.0; 3];
        positional_encoding_backward(&x, l, &d_enc, &mut d_x);
        let h = 1e-7;
        for i in 0..3 {
            let eval = |xi: f64| {
                let mut xs = x;
                xs[i] = xi;
                let mut out = Vec::new();
                positional_encoding(&xs, l, &mut out);
                out.iter().zip(&d_enc).map(|(a, b)| a * b).sum::<f64>()
            };
            let fd = (eval(x[i] + h) - eval(x[i] - h)) / (2.0 * h);
            assert_relative_eq!(d_x[i], fd, epsilon = 1e-5, max_relative = 1e-5);
        }
    }

    fn tiny_setup() -> (EncodingConfig, ColorMlp, SpacetimeGaussian, Pose) {
        let enc = EncodingConfig {
            l_pos: 2,
            l_view: 1,
            l_pose: 1,
            motion_feat: 4,
        };
        let mut rng = StdRng::seed_from_u64(9);
        let mlp = ColorMlp::new(&enc, 2, 1, 5, 2, 16, &mut rng);
        let g = SpacetimeGaussian {
            canonical_pos: Vec3::new(0.1, 0.2, 0.3),
            motion_coeffs: vec![Vec3::new(0.3, -0.2, 0.1), Vec3::new(-0.1, 0.2, 0.4)],
            temporal_center_pos: 0.0,
            rot_coeffs: vec![Vec4::new(1.0, 0.1, 0.0, -0.1), Vec4::new(0.0, 0.2, -0.1, 0.1)],
            temporal_center_rot: 0.0,
            log_scales: Vec3::zeros(),
            base_opacity: 0.0,
            temporal_sharpness: 0.0,
            appearance_feat: vec![0.2, -0.3, 0.5, 0.1, -0.2],
        };
        let mut pose = Pose::rest(2);
        let q = quat_from_axis_angle(Vec3::z(), 0.4);
        pose.rotations[1] = [q[0], q[1], q[2], q[3]];
        (enc, mlp, g, pose)
    }

    #[test]
    fn color_is_in_unit_range_and_deterministic() {
        let (enc, mlp, g, pose) = tiny_setup();
        let pose_enc = encode_pose(&pose, enc.l_pose);
        let view = Vec3::new(0.3, -0.5, 1.0).normalize();
        let pos = Vec3::new(0.4, -0.1, 0.8);
        let motion = motion_input(&g);
        let (rgb, _) = color_forward(&mlp, &enc, pos, &motion, &g.appearance_feat, &pose_enc, view);
        assert!(rgb.iter().all(|c| (0.0..1.0).contains(c)));
        let (rgb2, _) = color_forward(&mlp, &enc, pos, &motion, &g.appearance_feat, &pose_enc, view);
        assert_eq!(rgb, rgb2);
        // Pose conditioning actually reaches the output.
        let rest_enc = encode_pose(&Pose::rest(2), enc.l_pose);
        let (rgb3, _) = color_forward(&mlp, &enc, pos, &motion, &g.appearance_feat, &rest_enc, view);
        assert_ne!(rgb, rgb3);
    }

    #[test]
    fn mlp_backward_matches_finite_differences() {
        let (enc, mlp, g, pose) = tiny_setup();
        let pose_enc = encode_pose(&pose, enc.l_pose);
        let view = Vec3::new(-0.2, 0.4, 1.0).normalize();
        let pos = Vec3::new(0.25, -0.15, 0.6);
        let motion = motion_input(&g);
        let up = [0.7, -1.2, 0.5];

        let loss = |mlp: &ColorMlp, pos: Vec3, motion: &[f64], feat: &[f64]| {
            let (rgb, _) = color_forward(mlp, &enc, pos, motion, feat, &pose_enc, view);
            rgb.iter().zip(&up).map(|(a, b)| a * b).sum::<f64>()
        };

        let mut grads = MlpGrad::zeros_like(&mlp);
        let (_, cache) = color_forward(&mlp, &enc, pos, &motion, &g.appearance_feat, &pose_enc, view);
        let input_grad = color_backward(&mlp, &enc, &cache, up, &mut grads);

        let h = 1e-6;
        let tol = 1e-5;
        for k in 0..3 {
            let mut pp = pos;
            let mut pm = pos;
            pp[k] += h;
            pm[k] -= h;
            let fd = (loss(&mlp, pp, &motion, &g.appearance_feat)
                - loss(&mlp, pm, &motion, &g.appearance_feat))
                / (2.0 * h);
            assert_relative_eq!(input_grad.position[k], fd, epsilon = tol, max_relative = tol);
        }
        for k in 0..motion.len() {
            let mut mp = motion.clone();
            let mut mm = motion.clone();
            mp[k] += h;
            mm[k] -= h;
            let fd = (loss(&mlp, pos, &mp, &g.appearance_feat) - loss(&mlp, pos, &mm, &g.appearance_feat))
                / (2.0 * h);
            assert_relative_eq!(input_grad.motion_raw[k], fd, epsilon = tol, max_relative = tol);
        }
        for k in 0..g.appearance_feat.len() {
            let mut fp = g.appearance_feat.clone();
            let mut fm = g.appearance_feat.clone();
            fp[k] += h;
            fm[k] -= h;
            let fd = (loss(&mlp, pos, &motion, &fp) - loss(&mlp, pos, &motion, &fm)) / (2.0 * h);
            assert_relative_eq!(input_grad.feat[k], fd, epsilon = tol, max_relative = tol);
        }
        // Spot-check weight gradients in every layer.
        let probe = |get: &dyn Fn(&ColorMlp) -> f64,
                         set: &dyn Fn(&mut ColorMlp, f64),
                         analytic: f64| {
            let mut mp = mlp.clone();
            set(&mut mp, get(&mlp) + h);
            let lp = loss(&mp, pos, &motion, &g.appearance_feat);
            let mut mm = mlp.clone();
            set(&mut mm, get(&mlp) - h);
            let lm = loss(&mm, pos, &motion, &g.appearance_feat);
            let fd = (lp - lm) / (2.0 * h);
            assert_relative_eq!(analytic, fd, epsilon = tol, max_relative = tol);
        };
        probe(&|m| m.l1.w[7], &|m, v| m.l1.w[7] = v, grads.l1.w[7]);
        probe(&|m| m.l1.b[3], &|m, v| m.l1.b[3] = v, grads.l1.b[3]);
        probe(&|m| m.l2.w[40], &|m, v| m.l2.w[40] = v, grads.l2.w[40]);
        probe(&|m| m.l3.w[5], &|m, v| m.l3.w[5] = v, grads.l3.w[5]);
        probe(&|m| m.l3.b[1], &|m, v| m.l3.b[1] = v, grads.l3.b[1]);
        probe(
            &|m| m.motion_proj.w[11],
            &|m, v| m.motion_proj.w[11] = v,
            grads.motion_proj.w[11],
        );
    }

    #[test]
    fn sh_dc_only_gives_offset_color() {
        let mut coeffs = vec![0.0; SH_COEFFS * 3];
        coeffs[0] = 0.8; // DC, red channel
        let (rgb, open) = sh_color(&coeffs, Vec3::new(0.3, -0.8, 0.5));
        assert_relative_eq!(rgb[0], 0.28209479177387814 * 0.8 + 0.5, epsilon = 1e-12);
        assert_relative_eq!(rgb[1], 0.5);
        assert!(open.iter().all(|&o| o));
        // Direction-independent.
        let (rgb2, _) = sh_color(&coeffs, Vec3::new(-1.0, 0.2, 0.1));
        assert_eq!(rgb[0], rgb2[0]);
    }

    #[test]
    fn sh_clips_and_masks_gradient() {
        let mut coeffs = vec![0.0; SH_COEFFS * 3];
        coeffs[0] = 10.0;
        coeffs[1] = -10.0;
        let dir = Vec3::new(0.1, 0.4, -0.9);
        let (rgb, open) = sh_color(&coeffs, dir);
        assert_eq!(rgb[0], 1.0);
        assert_eq!(rgb[1], 0.0);
        assert!(!open[0] && !open[1] && open[2]);
        let mut d = vec![0.0; SH_COEFFS * 3];
        sh_color_backward(dir, open, [1.0, 1.0, 1.0], &mut d);
        assert_eq!(d[0], 0.0);
        assert_eq!(d[1], 0.0);
        assert_relative_eq!(d[2], 0.28209479177387814, epsilon = 1e-12);
    }

    #[test]
    fn sh_backward_matches_finite_differences() {
        let mut coeffs: Vec<f64> = (0..SH_COEFFS * 3).map(|i| ((i as f64) * 0.13).sin() * 0.2).collect();
        let dir = Vec3::new(0.5, -0.3, 0.8);
        let up = [0.9, -0.4, 0.7];
        let (_, open) = sh_color(&coeffs, dir);
        let mut analytic = vec![0.0; SH_COEFFS * 3];
        sh_color_backward(dir, open, up, &mut analytic);
        let h = 1e-6;
        for k in 0..coeffs.len() {
            let orig = coeffs[k];
            coeffs[k] = orig + h;
            let lp: f64 = sh_color(&coeffs, dir).0.iter().zip(&up).map(|(a, b)| a * b).sum();
            coeffs[k] = orig - h;
            let lm: f64 = sh_color(&coeffs, dir).0.iter().zip(&up).map(|(a, b)| a * b).sum();
            coeffs[k] = orig;
            let fd = (lp - lm) / (2.0 * h);
            assert_relative_eq!(analytic[k], fd, epsilon = 1e-6, max_relative = 1e-6);
        }
    }

    #[test]
    fn motion_input_flattens_all_coefficients() {
        let (_, _, g, _) = tiny_setup();
        let m = motion_input(&g);
        assert_eq!(m.len(), ColorMlp::motion_input_dim(2, 1));
        assert_eq!(m[0], 0.3);
        assert_eq!(m[6], 1.0); // c_0 w component
    }
}
