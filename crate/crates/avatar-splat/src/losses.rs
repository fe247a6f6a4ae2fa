use crate::error::Result;
use crate::gauss::{GaussianGrad, SpacetimeGaussian};
use crate::img::{Image, Mask};
use crate::math::*;
use crate::metrics::ssim_with_grad;

pub const LAMBDA_MIN: f64 = 1e-4;
pub const LAMBDA_MAX: f64 = 10.0;

/// Mean absolute error and its gradient with respect to `render`.
pub fn l1_loss(render: &Image, gt: &Image) -> Result<(f64, Image)> {
    render.require_same_shape(gt, "L1 inputs")?;
    let n = render.data.len() as f64;
    let mut grad = Image::zeros(render.width, render.height, render.channels);
    let mut sum = 0.0;
    for (i, (&r, &g)) in render.data.iter().zip(&gt.data).enumerate() {
        let d = r - g;
        sum += d.abs();
        grad.data[i] = if d > 0.0 {
            1.0 / n
        } else if d < 0.0 {
            -1.0 / n
        } else {
            0.0
        };
    }
    Ok((sum / n, grad))
}

/// Photometric loss (1 - w)·L1 + w·(1 - SSIM) and its gradient with respect
/// to `render`.
pub fn rgb_loss(render: &Image, gt: &Image, ssim_weight: f64) -> Result<(f64, Image)> {
    let (l1, l1_grad) = l1_loss(render, gt)?;
    let (ssim, ssim_grad) = ssim_with_grad(render, gt)?;
    let loss = (1.0 - ssim_weight) * l1 + ssim_weight * (1.0 - ssim);
    let mut grad = l1_grad;
    for (g, s) in grad.data.iter_mut().zip(&ssim_grad.data) {
        *g = (1.0 - ssim_weight) * *g - ssim_weight * s;
    }
    Ok((loss, grad))
}

/// One splat's contribution to the flow loss: its compositing weight (treated
/// as a constant), its model-predicted screen velocity, and the observed flow
/// at its previous-frame projection.
#[derive(Debug, Clone, Copy)]
pub struct FlowSample {
    pub weight: f64,
    pub traj: Vec2,
    pub flow: Vec2,
}

/// Weighted mean L1 between predicted and observed screen velocities, with
/// the gradient for each predicted velocity.
pub fn flow_loss(samples: &[FlowSample]) -> (f64, Vec<Vec2>) {
    let total_w: f64 = samples.iter().map(|s| s.weight).sum();
    if total_w <= 0.0 {
        return (0.0, vec![Vec2::zeros(); samples.len()]);
    }
    let mut loss = 0.0;
    let mut grads = Vec::with_capacity(samples.len());
    for s in samples {
        let d = s.traj - s.flow;
        loss += s.weight * (d.x.abs() + d.y.abs());
        grads.push(Vec2::new(
            s.weight * d.x.signum_or_zero() / total_w,
            s.weight * d.y.signum_or_zero() / total_w,
        ));
    }
    (loss / total_w, grads)
}

trait SignumOrZero {
    fn signum_or_zero(self) -> f64;
}

impl SignumOrZero for f64 {
    fn signum_or_zero(self) -> f64 {
        if self > 0.0 {
            1.0
        } else if self < 0.0 {
            -1.0
        } else {
            0.0
        }
    }
}

/// Mean L1 between the current render and the previous one (a constant),
/// restricted to pixels outside the excluded region. Returns the gradient
/// with respect to `cur`.
pub fn temporal_loss(cur: &Image, prev: &Image, exclude: &Mask) -> Result<(f64, Image)> {
    cur.require_same_shape(prev, "temporal-loss inputs")?;
    let mut grad = Image::zeros(cur.width, cur.height, cur.channels);
    if exclude.width != cur.width || exclude.height != cur.height {
        return Err(crate::error::Error::data(format!(
            "temporal-loss mask is {}x{}, image is {}x{}",
            exclude.width, exclude.height, cur.width, cur.height
        )));
    }
    let outside = (cur.width * cur.height - exclude.count()) * cur.channels;
    if outside == 0 {
        return Ok((0.0, grad));
    }
    let n = outside as f64;
    let mut sum = 0.0;
    for y in 0..cur.height {
        for x in 0..cur.width {
            if exclude.get(x, y) {
                continue;
            }
            for ch in 0..cur.channels {
                let d = cur.get(x, y, ch) - prev.get(x, y, ch);
                sum += d.abs();
                grad.set(x, y, ch, d.signum_or_zero() / n);
            }
        }
    }
    Ok((sum / n, grad))
}

/// Mean opacity plus order-weighted polynomial energy:
/// mean_i sigmoid(o_i) + mean_i Σ_k k² (‖b_k‖² + ‖c_k‖²), k ≥ 1.
/// Gradients scaled by `scale` accumulate into `grads`; the raw loss returns.
pub fn reg_loss(gaussians: &[SpacetimeGaussian], grads: &mut [GaussianGrad], scale: f64) -> f64 {
    debug_assert_eq!(gaussians.len(), grads.len());
    if gaussians.is_empty() {
        return 0.0;
    }
    let n = gaussians.len() as f64;
    let mut loss = 0.0;
    for (g, gr) in gaussians.iter().zip(grads.iter_mut()) {
        let s = sigmoid(g.base_opacity);
        loss += s;
        gr.base_opacity += scale * s * (1.0 - s) / n;
        for (k, b) in g.motion_coeffs.iter().enumerate() {
            let k2 = ((k + 1) * (k + 1)) as f64;
            loss += k2 * b.norm_squared();
            gr.motion_coeffs[k] += b * (scale * 2.0 * k2 / n);
        }
        for (k, c) in g.rot_coeffs.iter().enumerate().skip(1) {
            let k2 = (k * k) as f64;
            loss += k2 * c.norm_squared();
            gr.rot_coeffs[k] += c * (scale * 2.0 * k2 / n);
        }
    }
    loss / n
}

/// Keeps the auxiliary losses at fixed ratios of the photometric loss by
/// tracking exponential moving averages of each and scaling accordingly:
/// λ_i = clamp(r_i · ema(L_rgb) / ema(L_i), 1e-4, 10).
#[derive(Debug, Clone)]
pub struct AdaptiveWeights {
    pub ratios: [f64; 3],
    pub decay: f64,
    ema_rgb: Option<f64>,
    ema_aux: [Option<f64>; 3],
}

impl AdaptiveWeights {
    pub fn new(ratios: [f64; 3], decay: f64) -> Self {
        AdaptiveWeights {
            ratios,
            decay,
            ema_rgb: None,
            ema_aux: [None; 3],
        }
    }

    /// Folds this iteration's losses into the averages and returns the
    /// weights to apply. An absent auxiliary loss keeps its average and gets
    /// weight zero.
    pub fn update(&mut self, rgb: f64, aux: [Option<f64>; 3]) -> [f64; 3] {
        let blend = |ema: &mut Option<f64>, x: f64, decay: f64| {
            *ema = Some(match *ema {
                None => x,
                Some(e) => decay * e + (1.0 - decay) * x,
            });
        };
        blend(&mut self.ema_rgb, rgb, self.decay);
        let rgb_ema = self.ema_rgb.unwrap();
        let mut out = [0.0; 3];
        for i in 0..3 {
            if let Some(l) = aux[i] {
                blend(&mut self.ema_aux[i], l, self.decay);
                let aux_ema = self.ema_aux[i].unwrap().max(1e-12);
                out[i] = (self.ratios[i] * rgb_ema / aux_ema).clamp(LAMBDA_MIN, LAMBDA_MAX);
            }
        }
        out
    }
}
