use crate::error::{Error, Result};
use crate::img::Image;

pub const PSNR_CAP: f64 = 99.0;
const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

/// Peak signal-to-noise ratio in dB for unit-range images, capped at 99.
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    a.require_same_shape(b, "psnr inputs")?;
    let mse: f64 = a
        .data
        .iter()
        .zip(&b.data)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / a.data.len() as f64;
    if mse <= 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((-10.0 * mse.log10()).min(PSNR_CAP))
}

fn gaussian_kernel() -> [f64; SSIM_WINDOW] {
    let mut g = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    let mut sum = 0.0;
    for (i, v) in g.iter_mut().enumerate() {
        let d = i as f64 - c;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
        sum += *v;
    }
    for v in &mut g {
        *v /= sum;
    }
    g
}

/// Separable valid-mode convolution with a symmetric 1D kernel.
fn conv_valid(plane: &[f64], w: usize, h: usize, g: &[f64]) -> Vec<f64> {
    let k = g.len();
    let ow = w - k + 1;
    let oh = h - k + 1;
    let mut tmp = vec![0.0; ow * h];
    for y in 0..h {
        for x in 0..ow {
            let mut acc = 0.0;
            for (i, gi) in g.iter().enumerate() {
                acc += gi * plane[y * w + x + i];
            }
            tmp[y * ow + x] = acc;
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            let mut acc = 0.0;
            for (i, gi) in g.iter().enumerate() {
                acc += gi * tmp[(y + i) * ow + x];
            }
            out[y * ow + x] = acc;
        }
    }
    out
}

/// Adjoint of `conv_valid`: scatters window-position gradients back to pixels.
fn conv_valid_transpose(d_out: &[f64], w: usize, h: usize, g: &[f64]) -> Vec<f64> {
    let k = g.len();
    let ow = w - k + 1;
    let oh = h - k + 1;
    let mut tmp = vec![0.0; ow * h];
    for y in 0..h {
        for x in 0..ow {
            let mut acc = 0.0;
            for (i, gi) in g.iter().enumerate() {
                let yy = y as isize - i as isize;
                if yy >= 0 && (yy as usize) < oh {
                    acc += gi * d_out[yy as usize * ow + x];
                }
            }
            tmp[y * ow + x] = acc;
        }
    }
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (i, gi) in g.iter().enumerate() {
                let xx = x as isize - i as isize;
                if xx >= 0 && (xx as usize) < ow {
                    acc += gi * tmp[y * ow + xx as usize];
                }
            }
            out[y * w + x] = acc;
        }
    }
    out
}

fn channel_plane(img: &Image, c: usize) -> Vec<f64> {
    img.data.iter().skip(c).step_by(img.channels).copied().collect()
}

/// Structural similarity, 11x11 Gaussian window (σ = 1.5), valid mode,
/// averaged over channels. Optionally returns dSSIM/dx.
fn ssim_impl(x: &Image, y: &Image, want_grad: bool) -> Result<(f64, Option<Image>)> {
    x.require_same_shape(y, "ssim inputs")?;
    let (w, h) = (x.width, x.height);
    if w < SSIM_WINDOW || h < SSIM_WINDOW {
        return Err(Error::data(format!(
            "ssim needs at least {SSIM_WINDOW}x{SSIM_WINDOW} images, got {h}x{w}"
        )));
    }
    let g = gaussian_kernel();
    let ow = w - SSIM_WINDOW + 1;
    let oh = h - SSIM_WINDOW + 1;
    let denom = (ow * oh * x.channels) as f64;

    let mut total = 0.0;
    let mut grad = want_grad.then(|| Image::zeros(w, h, x.channels));
    for c in 0..x.channels {
        let xp = channel_plane(x, c);
        let yp = channel_plane(y, c);
        let x2: Vec<f64> = xp.iter().map(|v| v * v).collect();
        let y2: Vec<f64> = yp.iter().map(|v| v * v).collect();
        let xy: Vec<f64> = xp.iter().zip(&yp).map(|(a, b)| a * b).collect();
        let mu_x = conv_valid(&xp, w, h, &g);
        let mu_y = conv_valid(&yp, w, h, &g);
        let e_x2 = conv_valid(&x2, w, h, &g);
        let e_y2 = conv_valid(&y2, w, h, &g);
        let e_xy = conv_valid(&xy, w, h, &g);

        let mut d_mu_x = vec![0.0; ow * oh];
        let mut d_e_x2 = vec![0.0; ow * oh];
        let mut d_e_xy = vec![0.0; ow * oh];
        for p in 0..ow * oh {
            let (mx, my) = (mu_x[p], mu_y[p]);
            let vx = e_x2[p] - mx * mx;
            let vy = e_y2[p] - my * my;
            let vxy = e_xy[p] - mx * my;
            let a1 = 2.0 * mx * my + SSIM_C1;
            let a2 = 2.0 * vxy + SSIM_C2;
            let b1 = mx * mx + my * my + SSIM_C1;
            let b2 = vx + vy + SSIM_C2;
            let s = (a1 * a2) / (b1 * b2);
            total += s;
            if want_grad {
                let d_s = 1.0 / denom;
                let d_vx = -s / b2 * d_s;
                let d_vxy = 2.0 * a1 / (b1 * b2) * d_s;
                let d_mx = (2.0 * my * a2 / (b1 * b2) - 2.0 * mx * s / b1) * d_s
                    - 2.0 * mx * d_vx
                    - my * d_vxy;
                d_mu_x[p] = d_mx;
                d_e_x2[p] = d_vx;
                d_e_xy[p] = d_vxy;
            }
        }
        if let Some(grad) = grad.as_mut() {
            let t_mu = conv_valid_transpose(&d_mu_x, w, h, &g);
            let t_x2 = conv_valid_transpose(&d_e_x2, w, h, &g);
            let t_xy = conv_valid_transpose(&d_e_xy, w, h, &g);
            for i in 0..w * h {
                let d = t_mu[i] + 2.0 * xp[i] * t_x2[i] + yp[i] * t_xy[i];
                grad.data[i * x.channels + c] = d;
            }
        }
    }
    Ok((total / denom, grad))
}

pub fn ssim(x: &Image, y: &Image) -> Result<f64> {
    Ok(ssim_impl(x, y, false)?.0)
}

/// SSIM plus its gradient w.r.t. the first image.
pub fn ssim_with_grad(x: &Image, y: &Image) -> Result<(f64, Image)> {
    let (v, g) = ssim_impl(x, y, true)?;
    Ok((v, g.expect("gradient requested")))
}
