use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::gauss::{grad_params, GaussianGrad, PosedGaussian, PosedGrad, SpacetimeGaussian};
use crate::math::*;
use crate::skeleton::{lbs_rotation, lbs_transform, BoneWeights, Pose, Skeleton};

/// Poses one splat at time `t` under skinning transforms `bts`.
///
/// Positions blend all influences (LBS) and then add the world-space motion
/// polynomial; the covariance is rotated rigidly by the dominant influence so
/// it stays positive definite under any blend.
pub fn deform(
    g: &SpacetimeGaussian,
    t: f64,
    bts: &[Mat4],
    weights: &BoneWeights,
) -> PosedGaussian {
    let local = g.posed_local(t);
    let r_dom = rotation_part(&bts[weights.dominant_bone()]);
    PosedGaussian {
        position: lbs_transform(g.canonical_pos, weights, bts) + g.motion_offset(t),
        covariance: r_dom * local.covariance * r_dom.transpose(),
        opacity: local.opacity,
        appearance: local.appearance,
    }
}

/// Poses every splat for one frame; forward kinematics runs once.
pub fn deform_batch(
    gaussians: &[SpacetimeGaussian],
    skeleton: &Skeleton,
    pose: &Pose,
    weights: &[BoneWeights],
    t: f64,
) -> Result<Vec<PosedGaussian>> {
    if gaussians.len() != weights.len() {
        return Err(Error::data(format!(
            "{} splats but {} skinning weight entries",
            gaussians.len(),
            weights.len()
        )));
    }
    let bts = skeleton.forward_kinematics(pose)?;
    Ok(deform_batch_posed(gaussians, t, &bts, weights))
}

/// `deform` over a batch with precomputed skinning transforms.
pub fn deform_batch_posed(
    gaussians: &[SpacetimeGaussian],
    t: f64,
    bts: &[Mat4],
    weights: &[BoneWeights],
) -> Vec<PosedGaussian> {
    gaussians
        .par_iter()
        .zip_eq(weights.par_iter())
        .map(|(g, w)| deform(g, t, bts, w))
        .collect()
}

/// Backward of `deform`: upstream gradients are in world space; the
/// covariance gradient is rotated into the splat frame, the position gradient
/// is pulled through the LBS Jacobian Σ_b w_b R_b for the canonical position
/// while motion coefficients keep the world-space gradient.
pub fn deform_backward(
    g: &SpacetimeGaussian,
    t: f64,
    bts: &[Mat4],
    weights: &BoneWeights,
    upstream: &PosedGrad,
) -> GaussianGrad {
    let r_dom = rotation_part(&bts[weights.dominant_bone()]);
    let local_up = PosedGrad {
        position: upstream.position,
        covariance: r_dom.transpose() * upstream.covariance * r_dom,
        opacity: upstream.opacity,
        appearance: upstream.appearance.clone(),
    };
    let mut grad = grad_params(g, t, &local_up);
    grad.canonical_pos = lbs_rotation(weights, bts).transpose() * upstream.position;
    grad
}
