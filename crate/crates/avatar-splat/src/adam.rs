//! Bias-corrected Adam over splat parameters and MLP weights. State is kept
//! per splat so densification and pruning can edit rows in lockstep; each
//! parameter group of each splat (and each layer tensor of the MLP) skips its
//! update independently when its gradient is non-finite.

use std::ops::Range;

use crate::appearance::{ColorMlp, Linear, LinearGrad, MlpGrad};
use crate::gauss::{GaussianGrad, SpacetimeGaussian};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// One bias-corrected Adam step on a flat tensor. Returns false and leaves
/// everything untouched when any gradient entry is non-finite.
pub fn adam_update(
    params: &mut [f64],
    grads: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    lr: f64,
    step: u64,
) -> bool {
    debug_assert_eq!(params.len(), grads.len());
    debug_assert_eq!(params.len(), m.len());
    debug_assert_eq!(params.len(), v.len());
    debug_assert!(step >= 1);
    if grads.iter().any(|g| !g.is_finite()) {
        return false;
    }
    let b1c = 1.0 - BETA1.powi(step.min(i32::MAX as u64) as i32);
    let b2c = 1.0 - BETA2.powi(step.min(i32::MAX as u64) as i32);
    for i in 0..params.len() {
        m[i] = BETA1 * m[i] + (1.0 - BETA1) * grads[i];
        v[i] = BETA2 * v[i] + (1.0 - BETA2) * grads[i] * grads[i];
        let m_hat = m[i] / b1c;
        let v_hat = v[i] / b2c;
        params[i] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
    }
    true
}

/// Learning rates per splat parameter group.
#[derive(Debug, Clone, Copy)]
pub struct SplatLrs {
    pub position: f64,
    pub motion: f64,
    pub rotation: f64,
    pub scale: f64,
    pub opacity: f64,
    pub temporal: f64,
    pub feature: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum ParamGroup {
    Position,
    Motion,
    Rotation,
    Scale,
    Opacity,
    Temporal,
    Feature,
}

impl SplatLrs {
    fn get(&self, group: ParamGroup) -> f64 {
        match group {
            ParamGroup::Position => self.position,
            ParamGroup::Motion => self.motion,
            ParamGroup::Rotation => self.rotation,
            ParamGroup::Scale => self.scale,
            ParamGroup::Opacity => self.opacity,
            ParamGroup::Temporal => self.temporal,
            ParamGroup::Feature => self.feature,
        }
    }
}

/// Flat ordering of one splat's parameters used by the optimizer state:
/// position, motion coefficients, rotation coefficients, log scales, opacity
/// logit, temporal centers and sharpness, appearance features.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SplatLayout {
    pub n_p: usize,
    pub n_q: usize,
    pub feat: usize,
}

impl SplatLayout {
    pub fn for_gaussian(g: &SpacetimeGaussian) -> Self {
        SplatLayout {
            n_p: g.n_p(),
            n_q: g.n_q(),
            feat: g.appearance_feat.len(),
        }
    }

    pub fn len(&self) -> usize {
        3 + 3 * self.n_p + 4 * (self.n_q + 1) + 3 + 1 + 3 + self.feat
    }

    fn groups(&self) -> [(Range<usize>, ParamGroup); 7] {
        let motion_end = 3 + 3 * self.n_p;
        let rot_end = motion_end + 4 * (self.n_q + 1);
        let scale_end = rot_end + 3;
        let opacity_end = scale_end + 1;
        let temporal_end = opacity_end + 3;
        [
            (0..3, ParamGroup::Position),
            (3..motion_end, ParamGroup::Motion),
            (motion_end..rot_end, ParamGroup::Rotation),
            (rot_end..scale_end, ParamGroup::Scale),
            (scale_end..opacity_end, ParamGroup::Opacity),
            (opacity_end..temporal_end, ParamGroup::Temporal),
            (temporal_end..temporal_end + self.feat, ParamGroup::Feature),
        ]
    }

    fn flatten(
        &self,
        pos: &[f64; 3],
        motion: &[f64],
        rot: &[f64],
        scales: &[f64; 3],
        opacity: f64,
        temporal: &[f64; 3],
        feat: &[f64],
    ) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.len());
        out.extend_from_slice(pos);
        out.extend_from_slice(motion);
        out.extend_from_slice(rot);
        out.extend_from_slice(scales);
        out.push(opacity);
        out.extend_from_slice(temporal);
        out.extend_from_slice(feat);
        out
    }

    fn flatten_params(&self, g: &SpacetimeGaussian) -> Vec<f64> {
        let motion: Vec<f64> = g.motion_coeffs.iter().flat_map(|b| [b.x, b.y, b.z]).collect();
        let rot: Vec<f64> = g.rot_coeffs.iter().flat_map(|c| [c.x, c.y, c.z, c.w]).collect();
        self.flatten(
            &[g.canonical_pos.x, g.canonical_pos.y, g.canonical_pos.z],
            &motion,
            &rot,
            &[g.log_scales.x, g.log_scales.y, g.log_scales.z],
            g.base_opacity,
            &[g.temporal_center_pos, g.temporal_center_rot, g.temporal_sharpness],
            &g.appearance_feat,
        )
    }

    fn flatten_grad(&self, gr: &GaussianGrad) -> Vec<f64> {
        let motion: Vec<f64> = gr.motion_coeffs.iter().flat_map(|b| [b.x, b.y, b.z]).collect();
        let rot: Vec<f64> = gr.rot_coeffs.iter().flat_map(|c| [c.x, c.y, c.z, c.w]).collect();
        self.flatten(
            &[gr.canonical_pos.x, gr.canonical_pos.y, gr.canonical_pos.z],
            &motion,
            &rot,
            &[gr.log_scales.x, gr.log_scales.y, gr.log_scales.z],
            gr.base_opacity,
            &[gr.temporal_center_pos, gr.temporal_center_rot, gr.temporal_sharpness],
            &gr.appearance_feat,
        )
    }

    fn scatter(&self, vals: &[f64], g: &mut SpacetimeGaussian) {
        debug_assert_eq!(vals.len(), self.len());
        let mut i = 0;
        for k in 0..3 {
            g.canonical_pos[k] = vals[i];
            i += 1;
        }
        for b in g.motion_coeffs.iter_mut() {
            for k in 0..3 {
                b[k] = vals[i];
                i += 1;
            }
        }
        for c in g.rot_coeffs.iter_mut() {
            for k in 0..4 {
                c[k] = vals[i];
                i += 1;
            }
        }
        for k in 0..3 {
            g.log_scales[k] = vals[i];
            i += 1;
        }
        g.base_opacity = vals[i];
        i += 1;
        g.temporal_center_pos = vals[i];
        i += 1;
        g.temporal_center_rot = vals[i];
        i += 1;
        g.temporal_sharpness = vals[i];
        i += 1;
        g.appearance_feat.copy_from_slice(&vals[i..i + self.feat]);
    }
}

/// First and second moment estimates for one splat, in `SplatLayout` order.
#[derive(Debug, Clone)]
pub struct SplatAdam {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl SplatAdam {
    pub fn zeros(layout: SplatLayout) -> Self {
        SplatAdam {
            m: vec![0.0; layout.len()],
            v: vec![0.0; layout.len()],
        }
    }
}

/// Updates one splat's parameters group by group. Returns how many groups
/// were skipped for non-finite gradients.
pub fn update_splat(
    g: &mut SpacetimeGaussian,
    grad: &GaussianGrad,
    state: &mut SplatAdam,
    lrs: &SplatLrs,
    step: u64,
) -> u32 {
    let layout = SplatLayout::for_gaussian(g);
    debug_assert_eq!(state.m.len(), layout.len());
    let mut params = layout.flatten_params(g);
    let grads = layout.flatten_grad(grad);
    let mut skipped = 0;
    for (range, group) in layout.groups() {
        if !adam_update(
            &mut params[range.clone()],
            &grads[range.clone()],
            &mut state.m[range.clone()],
            &mut state.v[range.clone()],
            lrs.get(group),
            step,
        ) {
            skipped += 1;
        }
    }
    layout.scatter(&params, g);
    skipped
}

#[derive(Debug, Clone)]
pub struct LinearAdam {
    pub mw: Vec<f64>,
    pub vw: Vec<f64>,
    pub mb: Vec<f64>,
    pub vb: Vec<f64>,
}

impl LinearAdam {
    fn zeros(l: &Linear) -> Self {
        LinearAdam {
            mw: vec![0.0; l.w.len()],
            vw: vec![0.0; l.w.len()],
            mb: vec![0.0; l.b.len()],
            vb: vec![0.0; l.b.len()],
        }
    }

    fn update(&mut self, l: &mut Linear, grad: &LinearGrad, lr: f64, step: u64) -> u32 {
        let mut skipped = 0;
        if !adam_update(&mut l.w, &grad.w, &mut self.mw, &mut self.vw, lr, step) {
            skipped += 1;
        }
        if !adam_update(&mut l.b, &grad.b, &mut self.mb, &mut self.vb, lr, step) {
            skipped += 1;
        }
        skipped
    }
}

#[derive(Debug, Clone)]
pub struct MlpAdam {
    pub motion_proj: LinearAdam,
    pub l1: LinearAdam,
    pub l2: LinearAdam,
    pub l3: LinearAdam,
}

impl MlpAdam {
    pub fn new(mlp: &ColorMlp) -> Self {
        MlpAdam {
            motion_proj: LinearAdam::zeros(&mlp.motion_proj),
            l1: LinearAdam::zeros(&mlp.l1),
            l2: LinearAdam::zeros(&mlp.l2),
            l3: LinearAdam::zeros(&mlp.l3),
        }
    }
}

/// Updates all MLP layers with one learning rate; weight and bias of each
/// layer skip independently. Returns the skipped tensor count.
pub fn update_mlp(
    mlp: &mut ColorMlp,
    grad: &MlpGrad,
    state: &mut MlpAdam,
    lr: f64,
    step: u64,
) -> u32 {
    state.motion_proj.update(&mut mlp.motion_proj, &grad.motion_proj, lr, step)
        + state.l1.update(&mut mlp.l1, &grad.l1, lr, step)
        + state.l2.update(&mut mlp.l2, &grad.l2, lr, step)
        + state.l3.update(&mut mlp.l3, &grad.l3, lr, step)
}

/// Keeps `items[i]` where `keep[i]`, preserving order. Applied to splats,
/// optimizer states, and skinning weights together so rows stay aligned.
pub fn retain_by_mask<T>(items: &mut Vec<T>, keep: &[bool]) {
    debug_assert_eq!(items.len(), keep.len());
    let mut i = 0;
    items.retain(|_| {
        let k = keep[i];
        i += 1;
        k
    });
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::*;
    use approx::assert_relative_eq;

    // Textbook Adam, written independently of the implementation above:
    // scalar state per parameter, explicit power accumulation for the bias
    // correction terms.
    fn reference_trace(x0: &[f64], grad_fn: impl Fn(u64, usize) -> f64, lr: f64, steps: u64) -> Vec<f64> {
        let n = x0.len();
        let mut x = x0.to_vec();
        let mut m = vec![0.0; n];
        let mut v = vec![0.0; n];
        let mut b1_pow = 1.0;
        let mut b2_pow = 1.0;
        for t in 1..=steps {
            b1_pow *= 0.9;
            b2_pow *= 0.999;
            for i in 0..n {
                let g = grad_fn(t, i);
                m[i] = 0.9 * m[i] + 0.1 * g;
                v[i] = 0.999 * v[i] + 0.001 * g * g;
                let mh = m[i] / (1.0 - b1_pow);
                let vh = v[i] / (1.0 - b2_pow);
                x[i] -= lr * mh / (vh.sqrt() + 1e-8);
            }
        }
        x
    }

    #[test]
    fn matches_reference_trace() {
        let x0 = [0.5, -1.2, 3.0, 0.0, 7.5];
        let grad_fn = |t: u64, i: usize| (0.7 * t as f64 + 1.3 * i as f64).sin() * (1.0 + i as f64);
        let expected = reference_trace(&x0, grad_fn, 0.01, 120);

        let mut x = x0.to_vec();
        let mut m = vec![0.0; x.len()];
        let mut v = vec![0.0; x.len()];
        for t in 1..=120 {
            let g: Vec<f64> = (0..x.len()).map(|i| grad_fn(t, i)).collect();
            assert!(adam_update(&mut x, &g, &mut m, &mut v, 0.01, t));
        }
        for (a, b) in x.iter().zip(&expected) {
            assert_relative_eq!(a, b, epsilon = 1e-12, max_relative = 1e-12);
        }
    }

    #[test]
    fn first_step_moves_by_almost_lr_times_sign() {
        let mut x = vec![1.0];
        let mut m = vec![0.0];
        let mut v = vec![0.0];
        adam_update(&mut x, &[0.3], &mut m, &mut v, 0.05, 1);
        // m_hat = g, v_hat = g^2, so the step is lr * g / (|g| + eps).
        let expected = 1.0 - 0.05 * 0.3 / (0.3 + 1e-8);
        assert_relative_eq!(x[0], expected, epsilon = 1e-15);
    }

    #[test]
    fn non_finite_gradient_leaves_tensor_untouched() {
        let mut x = vec![1.0, 2.0];
        let mut m = vec![0.5, 0.5];
        let mut v = vec![0.25, 0.25];
        assert!(!adam_update(&mut x, &[0.1, f64::NAN], &mut m, &mut v, 0.1, 3));
        assert_eq!(x, vec![1.0, 2.0]);
        assert_eq!(m, vec![0.5, 0.5]);
        assert_eq!(v, vec![0.25, 0.25]);
        assert!(adam_update(&mut x, &[0.1, 0.1], &mut m, &mut v, 0.1, 4));
        assert_ne!(x, vec![1.0, 2.0]);
    }

    fn test_gaussian() -> SpacetimeGaussian {
        SpacetimeGaussian {
            canonical_pos: Vec3::new(0.1, 0.2, 0.3),
            motion_coeffs: vec![Vec3::new(0.01, 0.02, 0.03), Vec3::new(-0.01, 0.0, 0.005)],
            temporal_center_pos: 0.4,
            rot_coeffs: vec![Vec4::new(1.0, 0.0, 0.0, 0.0), Vec4::new(0.0, 0.1, 0.0, 0.0)],
            temporal_center_rot: 0.4,
            log_scales: Vec3::new(-2.0, -2.1, -2.2),
            base_opacity: 0.3,
            temporal_sharpness: 0.5,
            appearance_feat: vec![0.1, -0.2, 0.3],
        }
    }

    fn lrs() -> SplatLrs {
        SplatLrs {
            position: 1e-4,
            motion: 2e-4,
            rotation: 1e-3,
            scale: 5e-3,
            opacity: 5e-2,
            temporal: 1e-3,
            feature: 2.5e-3,
        }
    }

    #[test]
    fn group_learning_rates_apply_to_their_fields() {
        let mut g = test_gaussian();
        let before = g.clone();
        let mut grad = GaussianGrad::zeros_like(&g);
        grad.log_scales = Vec3::new(1.0, -1.0, 1.0);
        let mut state = SplatAdam::zeros(SplatLayout::for_gaussian(&g));
        let skipped = update_splat(&mut g, &grad, &mut state, &lrs(), 1);
        assert_eq!(skipped, 0);
        // Only the scale group moves (zero grads keep m_hat = 0 elsewhere)
        // and the step-1 magnitude is lr * g / (|g| + eps).
        assert_relative_eq!(g.log_scales.x, -2.0 - 5e-3 / (1.0 + 1e-8), epsilon = 1e-12);
        assert_relative_eq!(g.log_scales.y, -2.1 + 5e-3 / (1.0 + 1e-8), epsilon = 1e-12);
        assert_eq!(g.canonical_pos, before.canonical_pos);
        assert_eq!(g.base_opacity, before.base_opacity);
        assert_eq!(g.appearance_feat, before.appearance_feat);
    }

    #[test]
    fn non_finite_group_skips_only_itself() {
        let mut g = test_gaussian();
        let before = g.clone();
        let mut grad = GaussianGrad::zeros_like(&g);
        grad.rot_coeffs[1] = Vec4::new(f64::INFINITY, 0.0, 0.0, 0.0);
        grad.base_opacity = 1.0;
        let mut state = SplatAdam::zeros(SplatLayout::for_gaussian(&g));
        let skipped = update_splat(&mut g, &grad, &mut state, &lrs(), 1);
        assert_eq!(skipped, 1);
        assert_eq!(g.rot_coeffs, before.rot_coeffs);
        assert_relative_eq!(g.base_opacity, 0.3 - 5e-2 / (1.0 + 1e-8), epsilon = 1e-12);
    }

    #[test]
    fn mlp_update_touches_all_layers_and_counts_skips() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let enc = crate::appearance::EncodingConfig::default();
        let mut mlp = ColorMlp::new(&enc, 2, 1, 4, 3, 8, &mut rng);
        let w0 = mlp.l1.w[0];
        let mut grad = MlpGrad::zeros_like(&mlp);
        grad.l1.w[0] = 1.0;
        grad.l3.b[0] = f64::NAN;
        let mut state = MlpAdam::new(&mlp);
        let skipped = update_mlp(&mut mlp, &grad, &mut state, 1e-3, 1);
        assert_eq!(skipped, 1);
        assert_relative_eq!(mlp.l1.w[0], w0 - 1e-3 / (1.0 + 1e-8), epsilon = 1e-12);
    }

    #[test]
    fn retain_follows_mask() {
        let mut items = vec![10, 11, 12, 13, 14];
        retain_by_mask(&mut items, &[true, false, false, true, true]);
        assert_eq!(items, vec![10, 13, 14]);
    }
}
