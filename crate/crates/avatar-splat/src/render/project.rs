use crate::camera::{Camera, NEAR_CLIP};
use crate::gauss::PosedGaussian;
use crate::math::*;

use super::{Splat2D, SplatGrad, COV2D_REG};

/// Gradients w.r.t. a posed splat, pulled back through projection.
#[derive(Debug, Clone, Copy)]
pub struct PosedSplatGrad {
    pub position: Vec3,
    pub covariance: Mat3,
    pub opacity: f64,
    pub color: [f64; 3],
}

fn project_impl(
    posed: &PosedGaussian,
    color: [f64; 3],
    cam: &Camera,
    source: u32,
    footprint_cull: bool,
) -> Option<Splat2D> {
    if !posed.position.iter().all(|v| v.is_finite())
        || !posed.covariance.iter().all(|v| v.is_finite())
        || !posed.opacity.is_finite()
    {
        return None;
    }
    let pc = cam.to_camera(posed.position);
    if pc.z <= NEAR_CLIP {
        return None;
    }
    let mean = cam.project_camera_space(pc);
    // First-order screen-space covariance: T Σ Tᵀ with T = J·W, plus an
    // isotropic floor that keeps the footprint at least sub-pixel sized.
    let t = cam.projection_jacobian(pc) * cam.rotation();
    let ts = t * posed.covariance;
    let c00 = ts.row(0).dot(&t.row(0)) + COV2D_REG;
    let c01 = ts.row(0).dot(&t.row(1));
    let c11 = ts.row(1).dot(&t.row(1)) + COV2D_REG;
    let det = c00 * c11 - c01 * c01;
    if !(det > 1e-12) || !mean.iter().all(|v| v.is_finite()) {
        return None;
    }
    let radius = Vec2::new(3.0 * c00.sqrt() + 1.0, 3.0 * c11.sqrt() + 1.0);
    if footprint_cull
        && (mean.x + radius.x < 0.0
            || mean.y + radius.y < 0.0
            || mean.x - radius.x >= cam.width as f64
            || mean.y - radius.y >= cam.height as f64)
    {
        return None;
    }
    Some(Splat2D {
        mean,
        cov2d: Mat2::new(c00, c01, c01, c11),
        inv_cov: Mat2::new(c11 / det, -c01 / det, -c01 / det, c00 / det),
        radius,
        depth: pc.z,
        opacity: posed.opacity,
        color,
        source,
    })
}

/// EWA projection of a posed splat; `None` when behind the near plane or when
/// the 3σ footprint misses the image.
pub fn project(posed: &PosedGaussian, color: [f64; 3], cam: &Camera, source: u32) -> Option<Splat2D> {
    project_impl(posed, color, cam, source, true)
}

/// Projection with near-plane culling only; the reference renderer uses this
/// so off-screen splats still enter the compositing order.
pub fn project_unculled(
    posed: &PosedGaussian,
    color: [f64; 3],
    cam: &Camera,
    source: u32,
) -> Option<Splat2D> {
    project_impl(posed, color, cam, source, false)
}

/// Backward of `project`: maps screen-space gradients onto the posed splat.
///
/// The mean path reuses the projection Jacobian J; the covariance path
/// differentiates cov2d = (JW) Σ (JW)ᵀ both through Σ and through the
/// dependence of J on the camera-space position.
pub fn project_backward(posed: &PosedGaussian, cam: &Camera, grad: &SplatGrad) -> PosedSplatGrad {
    let pc = cam.to_camera(posed.position);
    let w = cam.rotation();
    let j = cam.projection_jacobian(pc);
    let t = j * w;

    let g2 = (grad.cov2d + grad.cov2d.transpose()) * 0.5;
    let d_cov_world = t.transpose() * g2 * t;

    // dL/dT = 2 G T Σ, then dL/dJ = dL/dT Wᵀ.
    let d_t = 2.0 * g2 * t * posed.covariance;
    let d_j = d_t * w.transpose();

    // Nonzero entries of J: J00 = fx/z, J02 = -fx x/z², J11 = fy/z, J12 = -fy y/z².
    let (fx, fy) = (cam.fx, cam.fy);
    let (x, y, z) = (pc.x, pc.y, pc.z);
    let inv_z2 = 1.0 / (z * z);
    let inv_z3 = inv_z2 / z;
    let mut d_pc = Vec3::new(
        d_j[(0, 2)] * (-fx * inv_z2),
        d_j[(1, 2)] * (-fy * inv_z2),
        d_j[(0, 0)] * (-fx * inv_z2)
            + d_j[(0, 2)] * (2.0 * fx * x * inv_z3)
            + d_j[(1, 1)] * (-fy * inv_z2)
            + d_j[(1, 2)] * (2.0 * fy * y * inv_z3),
    );
    // The pixel mean shares the same Jacobian.
    d_pc += j.transpose() * grad.mean;

    PosedSplatGrad {
        position: w.transpose() * d_pc,
        covariance: d_cov_world,
        opacity: grad.opacity,
        color: grad.color,
    }
}

/// dL/d(world position) for a plain projected point, given dL/d(pixel).
pub fn point_projection_backward(cam: &Camera, p_world: Vec3, d_uv: Vec2) -> Vec3 {
    let pc = cam.to_camera(p_world);
    (cam.projection_jacobian(pc) * cam.rotation()).transpose() * d_uv
}
