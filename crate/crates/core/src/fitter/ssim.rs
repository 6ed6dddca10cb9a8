//! Structural similarity (SSIM) with an analytic backward pass.
//!
//! The map follows the standard formulation: an 11×11 Gaussian window
//! (σ = 1.5) slides over each channel without padding, producing local
//! means `μ`, variances `σ²` and covariance `σ_xy`, and the per-pixel score
//!
//! ```text
//! S = (2μxμy + C1)(2σxy + C2) / ((μx² + μy² + C1)(σx² + σy² + C2))
//! ```
//!
//! with `C1 = 0.01²`, `C2 = 0.03²` on a [0, 1] dynamic range. The reported
//! value is the mean of `S` over all valid window positions and the three
//! channels. The backward pass pushes `∂mean/∂pred` through the same
//! windows by transposed convolution; both passes run on separable
//! filters, sequentially, so results are bit-stable.

use crate::image::{ImageGray, ImageRgb};
use crate::{Error, Result};

/// Window width (11 taps, σ = 1.5).
pub const WINDOW: usize = 11;
const SIGMA: f64 = 1.5;
const C1: f64 = 0.01 * 0.01;
const C2: f64 = 0.03 * 0.03;

/// Normalized 11-tap Gaussian window.
fn kernel() -> [f64; WINDOW] {
    let mut w = [0.0; WINDOW];
    let c = (WINDOW / 2) as f64;
    let mut sum = 0.0;
    for (i, wi) in w.iter_mut().enumerate() {
        *wi = (-((i as f64 - c) * (i as f64 - c)) / (2.0 * SIGMA * SIGMA)).exp();
        sum += *wi;
    }
    for wi in &mut w {
        *wi /= sum;
    }
    w
}

/// Single-channel plane with row-major storage.
#[derive(Clone)]
struct Plane {
    w: usize,
    h: usize,
    data: Vec<f64>,
}

impl Plane {
    fn zeros(w: usize, h: usize) -> Plane {
        Plane { w, h, data: vec![0.0; w * h] }
    }

    fn at(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.w + x]
    }

    fn at_mut(&mut self, x: usize, y: usize) -> &mut f64 {
        &mut self.data[y * self.w + x]
    }

    fn map2(&self, other: &Plane, f: impl Fn(f64, f64) -> f64) -> Plane {
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
        Plane { w: self.w, h: self.h, data }
    }
}

fn channel(img: &ImageRgb, ch: usize) -> Plane {
    let data = img.pixels().iter().map(|p| p[ch]).collect();
    Plane { w: img.width(), h: img.height(), data }
}

/// Valid (no padding) separable convolution; output shrinks by
/// `WINDOW − 1` in each dimension.
fn conv_valid(p: &Plane, k: &[f64; WINDOW]) -> Plane {
    let ow = p.w - (WINDOW - 1);
    // Rows first: (p.w, p.h) → (ow, p.h).
    let mut rows = Plane::zeros(ow, p.h);
    for y in 0..p.h {
        for x in 0..ow {
            let mut acc = 0.0;
            for (i, &ki) in k.iter().enumerate() {
                acc += ki * p.at(x + i, y);
            }
            *rows.at_mut(x, y) = acc;
        }
    }
    let oh = p.h - (WINDOW - 1);
    let mut out = Plane::zeros(ow, oh);
    for y in 0..oh {
        for x in 0..ow {
            let mut acc = 0.0;
            for (i, &ki) in k.iter().enumerate() {
                acc += ki * rows.at(x, y + i);
            }
            *out.at_mut(x, y) = acc;
        }
    }
    out
}

/// Transpose of [`conv_valid`]: scatters a valid-size field back to input
/// size. For the symmetric window this is zero-padded full convolution.
fn conv_valid_transpose(field: &Plane, k: &[f64; WINDOW], w: usize, h: usize) -> Plane {
    // Columns first (undo the second stage), then rows.
    let mut cols = Plane::zeros(field.w, h);
    for y in 0..field.h {
        for x in 0..field.w {
            let f = field.at(x, y);
            for (i, &ki) in k.iter().enumerate() {
                *cols.at_mut(x, y + i) += ki * f;
            }
        }
    }
    let mut out = Plane::zeros(w, h);
    for y in 0..h {
        for x in 0..cols.w {
            let f = cols.at(x, y);
            for (i, &ki) in k.iter().enumerate() {
                *out.at_mut(x + i, y) += ki * f;
            }
        }
    }
    out
}

fn check_pair(pred: &ImageRgb, gt: &ImageRgb) -> Result<()> {
    if pred.width() != gt.width() || pred.height() != gt.height() {
        return Err(Error::InvalidArgument(format!(
            "image size mismatch: {}x{} vs {}x{}",
            pred.width(),
            pred.height(),
            gt.width(),
            gt.height()
        )));
    }
    if pred.width() < WINDOW || pred.height() < WINDOW {
        return Err(Error::InvalidArgument(format!(
            "images must be at least {WINDOW}x{WINDOW} for SSIM, got {}x{}",
            pred.width(),
            pred.height()
        )));
    }
    Ok(())
}

/// Mean SSIM over valid positions and channels.
pub fn ssim(pred: &ImageRgb, gt: &ImageRgb) -> Result<f64> {
    ssim_impl(pred, gt, None, false).map(|(s, _)| s)
}

/// Mean SSIM restricted to valid positions whose window center is masked
/// in (mask > 0.5). Errors when the mask selects nothing.
pub fn ssim_masked(pred: &ImageRgb, gt: &ImageRgb, mask: &ImageGray) -> Result<f64> {
    if mask.width() != pred.width() || mask.height() != pred.height() {
        return Err(Error::InvalidArgument(format!(
            "mask size {}x{} does not match image size {}x{}",
            mask.width(),
            mask.height(),
            pred.width(),
            pred.height()
        )));
    }
    ssim_impl(pred, gt, Some(mask), false).map(|(s, _)| s)
}

/// Mean SSIM plus its gradient with respect to `pred`.
pub fn ssim_with_grad(pred: &ImageRgb, gt: &ImageRgb) -> Result<(f64, ImageRgb)> {
    let (s, g) = ssim_impl(pred, gt, None, true)?;
    Ok((s, g.expect("gradient requested")))
}

fn ssim_impl(
    pred: &ImageRgb,
    gt: &ImageRgb,
    mask: Option<&ImageGray>,
    with_grad: bool,
) -> Result<(f64, Option<ImageRgb>)> {
    check_pair(pred, gt)?;
    let k = kernel();
    let (w, h) = (pred.width(), pred.height());
    let (vw, vh) = (w - (WINDOW - 1), h - (WINDOW - 1));
    let half = WINDOW / 2;

    // Per-valid-pixel inclusion weights (1 everywhere, or the mask test at
    // the window center).
    let mut included = vec![true; vw * vh];
    if let Some(m) = mask {
        for y in 0..vh {
            for x in 0..vw {
                included[y * vw + x] = m.get(x + half, y + half) > 0.5;
            }
        }
    }
    let n_included = included.iter().filter(|&&b| b).count();
    if n_included == 0 {
        return Err(Error::InvalidArgument("mask selects no pixels".into()));
    }
    let norm = 1.0 / (n_included as f64 * 3.0);

    let mut total = 0.0;
    let mut grad = with_grad.then(|| ImageRgb::new(w, h));

    for ch in 0..3 {
        let x = channel(pred, ch);
        let y = channel(gt, ch);
        let mu_x = conv_valid(&x, &k);
        let mu_y = conv_valid(&y, &k);
        let ex2 = conv_valid(&x.map2(&x, |a, b| a * b), &k);
        let ey2 = conv_valid(&y.map2(&y, |a, b| a * b), &k);
        let exy = conv_valid(&x.map2(&y, |a, b| a * b), &k);

        // Upstream fields for the three x-dependent statistics.
        let mut f_mu = Plane::zeros(vw, vh);
        let mut f_xx = Plane::zeros(vw, vh);
        let mut f_xy = Plane::zeros(vw, vh);

        for py in 0..vh {
            for px in 0..vw {
                if !included[py * vw + px] {
                    continue;
                }
                let mx = mu_x.at(px, py);
                let my = mu_y.at(px, py);
                let sx2 = ex2.at(px, py) - mx * mx;
                let sy2 = ey2.at(px, py) - my * my;
                let sxy = exy.at(px, py) - mx * my;

                let a1 = 2.0 * mx * my + C1;
                let a2 = 2.0 * sxy + C2;
                let b1 = mx * mx + my * my + C1;
                let b2 = sx2 + sy2 + C2;
                let s = (a1 * a2) / (b1 * b2);
                total += s * norm;

                if with_grad {
                    let g = norm;
                    // ∂S/∂{A1, A2, B1, B2} chained to μx, E[x²], E[xy].
                    let d_a1 = g * a2 / (b1 * b2);
                    let d_a2 = g * a1 / (b1 * b2);
                    let d_b1 = -g * s / b1;
                    let d_b2 = -g * s / b2;
                    let g_sx2 = d_b2;
                    let g_sxy = 2.0 * d_a2;
                    let g_mu = 2.0 * my * d_a1 + 2.0 * mx * d_b1
                        - 2.0 * mx * g_sx2
                        - my * g_sxy;
                    *f_mu.at_mut(px, py) = g_mu;
                    *f_xx.at_mut(px, py) = g_sx2;
                    *f_xy.at_mut(px, py) = g_sxy;
                }
            }
        }

        if let Some(grad_img) = grad.as_mut() {
            let t_mu = conv_valid_transpose(&f_mu, &k, w, h);
            let t_xx = conv_valid_transpose(&f_xx, &k, w, h);
            let t_xy = conv_valid_transpose(&f_xy, &k, w, h);
            for iy in 0..h {
                for ix in 0..w {
                    let d = t_mu.at(ix, iy)
                        + 2.0 * x.at(ix, iy) * t_xx.at(ix, iy)
                        + y.at(ix, iy) * t_xy.at(ix, iy);
                    let mut px = grad_img.get(ix, iy);
                    px[ch] = d;
                    grad_img.set(ix, iy, px);
                }
            }
        }
    }

    Ok((total, grad))
}
