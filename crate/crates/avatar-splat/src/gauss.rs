use std::sync::atomic::{AtomicU64, Ordering};

use crate::math::*;

/// Times a polynomial rotation collapsed below `QUAT_NORM_EPS` and fell back
/// to the identity. Purely diagnostic.
pub static DEGENERATE_ROTATIONS: AtomicU64 = AtomicU64::new(0);

pub fn degenerate_rotation_count() -> u64 {
    DEGENERATE_ROTATIONS.load(Ordering::Relaxed)
}

/// One splat of the animatable model. Motion and rotation are polynomials in
/// normalized time around per-splat temporal centers; opacity carries a
/// Gaussian temporal envelope on top of a logit base value.
#[derive(Debug, Clone, PartialEq)]
pub struct SpacetimeGaussian {
    pub canonical_pos: Vec3,
    /// World-space motion coefficients b_k for k = 1..=n_p.
    pub motion_coeffs: Vec<Vec3>,
    /// Temporal center shared by the motion polynomial and opacity envelope.
    pub temporal_center_pos: f64,
    /// Quaternion coefficients c_k (w,x,y,z) for k = 0..=n_q.
    pub rot_coeffs: Vec<Vec4>,
    pub temporal_center_rot: f64,
    pub log_scales: Vec3,
    /// Logit of the base opacity.
    pub base_opacity: f64,
    /// Decay rate of the temporal opacity envelope; 0 disables it.
    pub temporal_sharpness: f64,
    pub appearance_feat: Vec<f64>,
}

impl SpacetimeGaussian {
    pub fn n_p(&self) -> usize {
        self.motion_coeffs.len()
    }

    pub fn n_q(&self) -> usize {
        self.rot_coeffs.len().saturating_sub(1)
    }

    /// Σ_k b_k (t - μ0)^k, the time-dependent world-space offset.
    pub fn motion_offset(&self, t: f64) -> Vec3 {
        let dt = t - self.temporal_center_pos;
        let mut off = Vec3::zeros();
        let mut p = dt;
        for b in &self.motion_coeffs {
            off += b * p;
            p *= dt;
        }
        off
    }

    /// Σ_k c_k (t - μτ)^k, before normalization.
    pub fn rotation_raw(&self, t: f64) -> Vec4 {
        let dt = t - self.temporal_center_rot;
        let mut q = Vec4::zeros();
        let mut p = 1.0;
        for c in &self.rot_coeffs {
            q += c * p;
            p *= dt;
        }
        q
    }

    /// Unit rotation at time t plus the pre-normalization norm.
    /// Degenerate polynomials yield the identity and bump the counter.
    pub fn rotation(&self, t: f64) -> (Vec4, f64) {
        let raw = self.rotation_raw(t);
        let (q, norm) = quat_normalize(raw);
        if norm < QUAT_NORM_EPS {
            DEGENERATE_ROTATIONS.fetch_add(1, Ordering::Relaxed);
        }
        (q, norm)
    }

    /// sigmoid(base) * exp(-sharpness * (t - μ0)^2), in [0, 1).
    pub fn temporal_opacity(&self, t: f64) -> f64 {
        let dt = t - self.temporal_center_pos;
        sigmoid(self.base_opacity) * (-self.temporal_sharpness * dt * dt).exp()
    }

    /// Peak of the temporal opacity envelope (its value at t = μ0).
    pub fn max_opacity(&self) -> f64 {
        sigmoid(self.base_opacity)
    }

    /// Evaluation at time t with identity skinning.
    pub fn posed_local(&self, t: f64) -> PosedGaussian {
        let (q, _) = self.rotation(t);
        PosedGaussian {
            position: self.canonical_pos + self.motion_offset(t),
            covariance: build_covariance(q, self.log_scales),
            opacity: self.temporal_opacity(t),
            appearance: self.appearance_feat.clone(),
        }
    }
}

/// A splat evaluated at a fixed time: world position, world covariance,
/// effective opacity, and the appearance feature carried through unchanged.
#[derive(Debug, Clone)]
pub struct PosedGaussian {
    pub position: Vec3,
    pub covariance: Mat3,
    pub opacity: f64,
    pub appearance: Vec<f64>,
}

/// Upstream gradients w.r.t. one posed splat.
#[derive(Debug, Clone)]
pub struct PosedGrad {
    pub position: Vec3,
    pub covariance: Mat3,
    pub opacity: f64,
    pub appearance: Vec<f64>,
}

impl PosedGrad {
    pub fn zeros(feat: usize) -> Self {
        PosedGrad {
            position: Vec3::zeros(),
            covariance: Mat3::zeros(),
            opacity: 0.0,
            appearance: vec![0.0; feat],
        }
    }
}

/// Gradient accumulator shaped like `SpacetimeGaussian`.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianGrad {
    pub canonical_pos: Vec3,
    pub motion_coeffs: Vec<Vec3>,
    pub temporal_center_pos: f64,
    pub rot_coeffs: Vec<Vec4>,
    pub temporal_center_rot: f64,
    pub log_scales: Vec3,
    pub base_opacity: f64,
    pub temporal_sharpness: f64,
    pub appearance_feat: Vec<f64>,
}

impl GaussianGrad {
    pub fn zeros_like(g: &SpacetimeGaussian) -> Self {
        GaussianGrad {
            canonical_pos: Vec3::zeros(),
            motion_coeffs: vec![Vec3::zeros(); g.motion_coeffs.len()],
            temporal_center_pos: 0.0,
            rot_coeffs: vec![Vec4::zeros(); g.rot_coeffs.len()],
            temporal_center_rot: 0.0,
            log_scales: Vec3::zeros(),
            base_opacity: 0.0,
            temporal_sharpness: 0.0,
            appearance_feat: vec![0.0; g.appearance_feat.len()],
        }
    }

    pub fn add_assign(&mut self, other: &GaussianGrad) {
        self.canonical_pos += other.canonical_pos;
        for (a, b) in self.motion_coeffs.iter_mut().zip(&other.motion_coeffs) {
            *a += b;
        }
        self.temporal_center_pos += other.temporal_center_pos;
        for (a, b) in self.rot_coeffs.iter_mut().zip(&other.rot_coeffs) {
            *a += b;
        }
        self.temporal_center_rot += other.temporal_center_rot;
        self.log_scales += other.log_scales;
        self.base_opacity += other.base_opacity;
        self.temporal_sharpness += other.temporal_sharpness;
        for (a, b) in self.appearance_feat.iter_mut().zip(&other.appearance_feat) {
            *a += b;
        }
    }
}

/// Σ = R S Sᵀ Rᵀ with S = diag(exp(log_scales)). Built entry-wise on the
/// upper triangle and mirrored, so Σ is symmetric to the last bit.
pub fn build_covariance(q_unit: Vec4, log_scales: Vec3) -> Mat3 {
    let r = quat_to_matrix(q_unit);
    let s2 = [
        (2.0 * log_scales.x).exp(),
        (2.0 * log_scales.y).exp(),
        (2.0 * log_scales.z).exp(),
    ];
    let mut cov = Mat3::zeros();
    for i in 0..3 {
        for j in i..3 {
            let mut v = 0.0;
            for (k, s) in s2.iter().enumerate() {
                v += r[(i, k)] * s * r[(j, k)];
            }
            cov[(i, j)] = v;
            cov[(j, i)] = v;
        }
    }
    cov
}

/// Backward of `build_covariance`: gradients w.r.t. the unit quaternion and
/// the log-scales, given dL/dΣ.
///
/// With Σ = R S² Rᵀ: dL/dR = (G + Gᵀ) R S², and for the diagonal scales
/// dL/d(log s_k) = (Rᵀ G R)_kk · 2 exp(2 log s_k).
pub fn covariance_backward(q_unit: Vec4, log_scales: Vec3, d_cov: &Mat3) -> (Vec4, Vec3) {
    let r = quat_to_matrix(q_unit);
    let s2 = Mat3::from_diagonal(&Vec3::new(
        (2.0 * log_scales.x).exp(),
        (2.0 * log_scales.y).exp(),
        (2.0 * log_scales.z).exp(),
    ));
    let d_r = (d_cov + d_cov.transpose()) * r * s2;
    let rt_g_r = r.transpose() * d_cov * r;
    let d_ls = Vec3::new(
        rt_g_r[(0, 0)] * 2.0 * s2[(0, 0)],
        rt_g_r[(1, 1)] * 2.0 * s2[(1, 1)],
        rt_g_r[(2, 2)] * 2.0 * s2[(2, 2)],
    );
    (quat_to_matrix_backward(q_unit, &d_r), d_ls)
}

/// Backward of `posed_local`: maps upstream gradients on the posed splat to
/// gradients on every `SpacetimeGaussian` field.
///
/// The position and covariance upstreams must be expressed in the splat's
/// local (pre-skinning) frame; skinned deformation wraps this by rotating
/// them first and replacing the canonical-position gradient.
pub fn grad_params(g: &SpacetimeGaussian, t: f64, upstream: &PosedGrad) -> GaussianGrad {
    let mut out = GaussianGrad::zeros_like(g);

    // Position: X = x_c + Σ b_k dt^k.
    let dt = t - g.temporal_center_pos;
    out.canonical_pos = upstream.position;
    let mut p = dt;
    let mut d_center = Vec3::zeros();
    for (k, b) in g.motion_coeffs.iter().enumerate() {
        out.motion_coeffs[k] = upstream.position * p;
        // d(dt^{k+1})/dμ0 = -(k+1) dt^k.
        d_center += b * (-((k + 1) as f64) * if k == 0 { 1.0 } else { dt.powi(k as i32) });
        p *= dt;
    }
    out.temporal_center_pos = upstream.position.dot(&d_center);

    // Covariance through the normalized rotation polynomial and log-scales.
    let raw = g.rotation_raw(t);
    let (q, norm) = quat_normalize(raw);
    let (d_q, d_ls) = covariance_backward(q, g.log_scales, &upstream.covariance);
    out.log_scales = d_ls;
    let d_raw = quat_normalize_backward(q, norm, d_q);
    let dtr = t - g.temporal_center_rot;
    let mut p = 1.0;
    let mut d_center_rot = Vec4::zeros();
    for (k, c) in g.rot_coeffs.iter().enumerate() {
        out.rot_coeffs[k] = d_raw * p;
        if k > 0 {
            d_center_rot += c * (-(k as f64) * dtr.powi(k as i32 - 1));
        }
        p *= dtr;
    }
    out.temporal_center_rot = d_raw.dot(&d_center_rot);

    // Opacity o = sigmoid(l) exp(-s dt^2); μ0 is shared with the motion path.
    let sig = sigmoid(g.base_opacity);
    let env = (-g.temporal_sharpness * dt * dt).exp();
    out.base_opacity = upstream.opacity * sig * (1.0 - sig) * env;
    out.temporal_sharpness = upstream.opacity * sig * env * (-dt * dt);
    out.temporal_center_pos += upstream.opacity * sig * env * 2.0 * g.temporal_sharpness * dt;

    out.appearance_feat.copy_from_slice(&upstream.appearance);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn sample_gaussian() -> SpacetimeGaussian {
        SpacetimeGaussian {
            canonical_pos: Vec3::new(0.3, -0.2, 1.1),
            motion_coeffs: vec![Vec3::new(0.4, -0.1, 0.2), Vec3::new(-0.3, 0.5, 0.1)],
            temporal_center_pos: 0.3,
            rot_coeffs: vec![Vec4::new(0.9, 0.1, -0.2, 0.3), Vec4::new(-0.2, 0.4, 0.1, -0.3)],
            temporal_center_rot: 0.4,
            log_scales: Vec3::new(-1.2, -0.8, -1.5),
            base_opacity: 0.4,
            temporal_sharpness: 0.7,
            appearance_feat: vec![0.1, -0.4, 0.2],
        }
    }

    #[test]
    fn motion_offset_quadratic() {
        let mut g = sample_gaussian();
        g.motion_coeffs = vec![Vec3::new(1.0, 0.0, 0.0), Vec3::new(0.0, 2.0, 0.0)];
        g.temporal_center_pos = 0.25;
        let off = g.motion_offset(0.75);
        assert_relative_eq!(off.x, 0.5, epsilon = 1e-15);
        assert_relative_eq!(off.y, 0.5, epsilon = 1e-15);
        assert_eq!(off.z, 0.0);
        assert_eq!(g.motion_offset(0.25), Vec3::zeros());
    }

    #[test]
    fn temporal_opacity_envelope() {
        let mut g = sample_gaussian();
        g.base_opacity = 0.0;
        g.temporal_center_pos = 0.5;
        g.temporal_sharpness = 0.0;
        // Flat envelope: sigmoid(0) everywhere.
        assert_relative_eq!(g.temporal_opacity(0.0), 0.5, epsilon = 1e-15);
        assert_relative_eq!(g.temporal_opacity(1.0), 0.5, epsilon = 1e-15);
        g.temporal_sharpness = 4.0;
        assert_relative_eq!(g.temporal_opacity(0.5), 0.5, epsilon = 1e-15);
        assert!(g.temporal_opacity(0.0) < 0.5 * (-0.9f64).exp());
        assert!(g.temporal_opacity(0.0) > 0.0);
    }

    #[test]
    fn degenerate_rotation_falls_back_to_identity() {
        let mut g = sample_gaussian();
        g.rot_coeffs = vec![Vec4::zeros(), Vec4::zeros()];
        let before = degenerate_rotation_count();
        let (q, norm) = g.rotation(0.7);
        assert_eq!(q, QUAT_IDENTITY);
        assert!(norm < QUAT_NORM_EPS);
        assert!(degenerate_rotation_count() > before);
    }

    #[test]
    fn covariance_is_exactly_symmetric_and_positive() {
        let g = sample_gaussian();
        let (q, _) = g.rotation(0.9);
        let cov = build_covariance(q, g.log_scales);
        for i in 0..3 {
            for j in 0..3 {
                assert_eq!(cov[(i, j)].to_bits(), cov[(j, i)].to_bits());
            }
        }
        let eig = cov.symmetric_eigenvalues();
        assert!(eig.min() > 0.0, "covariance not positive definite: {eig:?}");
    }

    #[test]
    fn covariance_rotates_scale_axes() {
        let q = quat_from_axis_angle(Vec3::z(), std::f64::consts::FRAC_PI_2);
        let cov = build_covariance(q, Vec3::new(2f64.ln(), 0.0, 0.0));
        // x-axis variance 4 rotated onto y.
        assert_relative_eq!(cov[(0, 0)], 1.0, epsilon = 1e-12);
        assert_relative_eq!(cov[(1, 1)], 4.0, epsilon = 1e-12);
        assert_relative_eq!(cov[(2, 2)], 1.0, epsilon = 1e-12);
        assert_relative_eq!(cov[(0, 1)], 0.0, epsilon = 1e-12);
    }

    #[test]
    fn identity_rotation_zero_scales_gives_identity_covariance() {
        let cov = build_covariance(QUAT_IDENTITY, Vec3::zeros());
        assert_relative_eq!(cov, Mat3::identity(), epsilon = 1e-15);
    }

    // Finite-difference check of the full parameter backward at a fixed time,
    // using a fixed upstream gradient on every posed output.
    #[test]
    fn grad_params_matches_finite_differences() {
        let g0 = sample_gaussian();
        let t = 0.85;
        let up = PosedGrad {
            position: Vec3::new(0.7, -1.3, 0.4),
            covariance: Mat3::new(0.5, -0.2, 0.3, -0.2, 0.8, 0.1, 0.3, 0.1, -0.6),
            opacity: 1.7,
            appearance: vec![0.3, 0.9, -0.5],
        };
        // Symmetrize the covariance upstream as the renderer backward does.
        let mut up = up;
        up.covariance = (up.covariance + up.covariance.transpose()) * 0.5;

        let loss = |g: &SpacetimeGaussian| {
            let p = g.posed_local(t);
            p.position.dot(&up.position)
                + p.covariance.component_mul(&up.covariance).sum()
                + p.opacity * up.opacity
                + p.appearance
                    .iter()
                    .zip(&up.appearance)
                    .map(|(a, b)| a * b)
                    .sum::<f64>()
        };

        let analytic = grad_params(&g0, t, &up);
        let h = 1e-6;
        let tol = 1e-5;
        let check = |name: &str, got: f64, fd: f64| {
            assert_relative_eq!(got, fd, epsilon = tol, max_relative = tol, );
            let _ = name;
        };

        let fd = |f: &mut dyn FnMut(&mut SpacetimeGaussian, f64)| {
            let mut gp = g0.clone();
            let mut gm = g0.clone();
            f(&mut gp, h);
            f(&mut gm, -h);
            (loss(&gp) - loss(&gm)) / (2.0 * h)
        };

        for i in 0..3 {
            check("pos", analytic.canonical_pos[i], fd(&mut |g, d| g.canonical_pos[i] += d));
        }
        for k in 0..2 {
            for i in 0..3 {
                check(
                    "motion",
                    analytic.motion_coeffs[k][i],
                    fd(&mut |g, d| g.motion_coeffs[k][i] += d),
                );
            }
        }
        check(
            "center_pos",
            analytic.temporal_center_pos,
            fd(&mut |g, d| g.temporal_center_pos += d),
        );
        for k in 0..2 {
            for i in 0..4 {
                check(
                    "rot",
                    analytic.rot_coeffs[k][i],
                    fd(&mut |g, d| g.rot_coeffs[k][i] += d),
                );
            }
        }
        check(
            "center_rot",
            analytic.temporal_center_rot,
            fd(&mut |g, d| g.temporal_center_rot += d),
        );
        for i in 0..3 {
            check("scales", analytic.log_scales[i], fd(&mut |g, d| g.log_scales[i] += d));
        }
        check("opacity", analytic.base_opacity, fd(&mut |g, d| g.base_opacity += d));
        check(
            "sharpness",
            analytic.temporal_sharpness,
            fd(&mut |g, d| g.temporal_sharpness += d),
        );
        for i in 0..3 {
            check(
                "feat",
                analytic.appearance_feat[i],
                fd(&mut |g, d| g.appearance_feat[i] += d),
            );
        }
    }
}
