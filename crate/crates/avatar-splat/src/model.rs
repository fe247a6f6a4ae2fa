use rayon::prelude::*;

use crate::appearance::{
    color_backward, color_forward, motion_input, motion_input_backward, sh_color,
    sh_color_backward, ColorCache, ColorMlp, EncodingConfig, MlpGrad, SH_COEFFS,
};
use crate::camera::Camera;
use crate::error::{Error, Result};
use crate::gauss::{GaussianGrad, PosedGaussian, SpacetimeGaussian};
use crate::math::*;
use crate::skeleton::BoneWeights;

/// How splat colors are produced: a conditioned MLP, or per-splat spherical
/// harmonics stored in the appearance features (9 coefficients per channel).
#[derive(Debug, Clone)]
pub enum ColorModel {
    Mlp(ColorMlp),
    Sh,
}

pub const SH_FEAT_DIM: usize = SH_COEFFS * 3;

#[derive(Debug, Clone)]
pub struct AvatarModel {
    pub n_p: usize,
    pub n_q: usize,
    pub feat_dim: usize,
    pub gaussians: Vec<SpacetimeGaussian>,
    pub skinning: Vec<BoneWeights>,
    pub encoding: EncodingConfig,
    pub color: ColorModel,
}

/// Per-splat state saved by the color forward pass for the backward pass.
pub enum ColorCaches {
    Mlp(Vec<ColorCache>),
    Sh(Vec<(Vec3, [bool; 3])>),
}

impl AvatarModel {
    pub fn validate(&self) -> Result<()> {
        if self.gaussians.len() != self.skinning.len() {
            return Err(Error::data(format!(
                "{} splats but {} skinning entries",
                self.gaussians.len(),
                self.skinning.len()
            )));
        }
        for g in &self.gaussians {
            if g.n_p() != self.n_p || g.n_q() != self.n_q || g.appearance_feat.len() != self.feat_dim {
                return Err(Error::data(
                    "splat parameter shapes disagree with the model header".to_string(),
                ));
            }
        }
        if matches!(self.color, ColorModel::Sh) && self.feat_dim != SH_FEAT_DIM {
            return Err(Error::data(format!(
                "spherical-harmonics color needs {SH_FEAT_DIM} features, model has {}",
                self.feat_dim
            )));
        }
        Ok(())
    }

    /// Colors for every splat under one frame's pose encoding and camera.
    pub fn splat_colors(
        &self,
        pose_enc: &[f64],
        posed: &[PosedGaussian],
        cam: &Camera,
    ) -> (Vec<[f64; 3]>, ColorCaches) {
        match &self.color {
            ColorModel::Mlp(mlp) => {
                let results: Vec<([f64; 3], ColorCache)> = self
                    .gaussians
                    .par_iter()
                    .zip_eq(posed.par_iter())
                    .map(|(g, p)| {
                        let motion_raw = motion_input(g);
                        color_forward(
                            mlp,
                            &self.encoding,
                            g.canonical_pos,
                            &motion_raw,
                            &g.appearance_feat,
                            pose_enc,
                            cam.view_dir(p.position),
                        )
                    })
                    .collect();
                let mut colors = Vec::with_capacity(results.len());
                let mut caches = Vec::with_capacity(results.len());
                for (c, cache) in results {
                    colors.push(c);
                    caches.push(cache);
                }
                (colors, ColorCaches::Mlp(caches))
            }
            ColorModel::Sh => {
                let results: Vec<([f64; 3], (Vec3, [bool; 3]))> = self
                    .gaussians
                    .par_iter()
                    .zip_eq(posed.par_iter())
                    .map(|(g, p)| {
                        let dir = cam.view_dir(p.position);
                        let (rgb, open) = sh_color(&g.appearance_feat, dir);
                        (rgb, (dir, open))
                    })
                    .collect();
                let mut colors = Vec::with_capacity(results.len());
                let mut caches = Vec::with_capacity(results.len());
                for (c, cache) in results {
                    colors.push(c);
                    caches.push(cache);
                }
                (colors, ColorCaches::Sh(caches))
            }
        }
    }

    /// Routes per-splat color gradients into splat parameters and (for the
    /// MLP) the shared network weights. View and pose inputs are data, not
    /// parameters, so their gradients are dropped.
    pub fn colors_backward(
        &self,
        caches: &ColorCaches,
        d_rgb: &[[f64; 3]],
        grads: &mut [GaussianGrad],
        mlp_grad: &mut Option<MlpGrad>,
    ) {
        match (&self.color, caches) {
            (ColorModel::Mlp(mlp), ColorCaches::Mlp(caches)) => {
                let mg = mlp_grad.as_mut().expect("MLP color model needs MLP gradients");
                for ((cache, &d), grad) in caches.iter().zip(d_rgb).zip(grads.iter_mut()) {
                    let input_grad = color_backward(mlp, &self.encoding, cache, d, mg);
                    grad.canonical_pos += input_grad.position;
                    motion_input_backward(&input_grad.motion_raw, grad);
                    for (a, b) in grad.appearance_feat.iter_mut().zip(&input_grad.feat) {
                        *a += b;
                    }
                }
            }
            (ColorModel::Sh, ColorCaches::Sh(caches)) => {
                for ((&(dir, open), &d), grad) in caches.iter().zip(d_rgb).zip(grads.iter_mut()) {
                    sh_color_backward(dir, open, d, &mut grad.appearance_feat);
                }
            }
            _ => panic!("color cache kind does not match the color model"),
        }
    }
}
