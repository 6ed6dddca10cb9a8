//! The fitting objective: image reconstruction plus parameter
//! regularizers, with analytic gradients for every optimizable block.
//!
//! The reconstruction term per frame is
//! `λ_l1·mean|pred − gt| + λ_ssim·(1 − SSIM)/2`, the mean running over
//! width × height × 3 channels. Regularizers keep scales in range
//! ([`reg_scale`]), penalize negative diffuse colors ([`reg_negcolor`],
//! evaluated on the shaded diffuse term of every Gaussian, visible or
//! not), hold eye Gaussians opaque ([`reg_eye`]) and optionally anchor
//! positions to their initial values. [`total_loss`] averages the
//! frame terms over a batch, adds the cloud-level terms once, and
//! returns the λ-weighted breakdown together with the gradient.

use rayon::prelude::*;

use super::grads::{shade_backward, view_dir_to_pos, CloudGrads};
use super::ssim::ssim_with_grad;
use super::{FitConfig, OlatFrame};
use crate::appearance::{shade_parts, view_dirs, ShadeContext, LIGHT_ORDER};
use crate::image::{ImageGray, ImageRgb};
use crate::scene::GaussianCloud;
use crate::sphmath::Y00;
use crate::splatter::{
    project_backward, project_gaussian, rasterize, rasterize_backward, sort_splats, Splat,
};
use crate::{sigmoid, Error, Result, Rgb, Vec3};

/// λ-weighted addends of the total loss; `total` is their sum.
#[derive(Clone, Copy, Debug, Default)]
pub struct LossBreakdown {
    pub total: f64,
    /// λ_l1 · mean absolute error, batch-averaged.
    pub rec_l1: f64,
    /// λ_ssim · (1 − SSIM)/2, batch-averaged.
    pub rec_ssim: f64,
    /// λ_negcolor · mean squared negative diffuse color, batch-averaged.
    pub negcolor: f64,
    /// λ_scale · scale-range penalty.
    pub scale: f64,
    /// Eye-group opacity/visibility/scale penalty (its λs are built in).
    pub eye: f64,
    /// λ_anchor · mean squared distance from the anchor positions.
    pub anchor: f64,
}

/// Reconstruction loss between a rendered frame and its ground truth.
pub fn loss_rec(pred: &ImageRgb, gt: &ImageRgb, cfg: &FitConfig) -> Result<f64> {
    let (l1, dssim, _) = loss_rec_impl(pred, gt, cfg, false)?;
    Ok(l1 + dssim)
}

/// Reconstruction loss split into its two λ-weighted parts plus the
/// gradient image with respect to `pred`.
fn loss_rec_impl(
    pred: &ImageRgb,
    gt: &ImageRgb,
    cfg: &FitConfig,
    with_grad: bool,
) -> Result<(f64, f64, Option<ImageRgb>)> {
    if pred.width() != gt.width() || pred.height() != gt.height() {
        return Err(Error::InvalidArgument(format!(
            "prediction is {}x{}, ground truth {}x{}",
            pred.width(),
            pred.height(),
            gt.width(),
            gt.height()
        )));
    }
    let n = (pred.width() * pred.height() * 3) as f64;
    let mut l1 = 0.0;
    for (p, g) in pred.pixels().iter().zip(gt.pixels()) {
        let d = p - g;
        l1 += d.x.abs() + d.y.abs() + d.z.abs();
    }
    l1 = cfg.lambda_l1 * l1 / n;

    let (s, grad) = if with_grad {
        let (s, ds) = ssim_with_grad(pred, gt)?;
        let mut g = ds;
        // d/dpred of λ_l1·mean|…| + λ_ssim·(1 − S)/2.
        let l1_w = cfg.lambda_l1 / n;
        let ssim_w = -0.5 * cfg.lambda_ssim;
        for (gp, (p, t)) in g.pixels_mut().iter_mut().zip(pred.pixels().iter().zip(gt.pixels())) {
            let d = p - t;
            let sign = d.map(|x| {
                if x > 0.0 {
                    1.0
                } else if x < 0.0 {
                    -1.0
                } else {
                    0.0
                }
            });
            *gp = ssim_w * *gp + l1_w * sign;
        }
        (s, Some(g))
    } else {
        (super::ssim::ssim(pred, gt)?, None)
    };
    Ok((l1, cfg.lambda_ssim * 0.5 * (1.0 - s), grad))
}

/// Scale-range penalty: mean over all 3N axes of
/// `1/max(s, 1e-7)` below 0.1, `(s − 10)²` above 10, zero between.
pub fn reg_scale(cloud: &GaussianCloud) -> f64 {
    let mut sum = 0.0;
    for g in &cloud.gaussians {
        for s in g.scale().iter() {
            sum += scale_penalty(*s).0;
        }
    }
    sum / (3.0 * cloud.gaussians.len() as f64)
}

/// Penalty and its derivative with respect to the (natural) scale.
fn scale_penalty(s: f64) -> (f64, f64) {
    if s < 0.1 {
        let floored = s.max(1e-7);
        let d = if s > 1e-7 { -1.0 / (floored * floored) } else { 0.0 };
        (1.0 / floored, d)
    } else if s > 10.0 {
        (
            (s - 10.0) * (s - 10.0),
            2.0 * (s - 10.0),
        )
    } else {
        (0.0, 0.0)
    }
}

/// Mean squared negative part over a set of diffuse colors (3 entries per
/// color; zero when everything is non-negative).
pub fn reg_negcolor(diffuse: &[Rgb]) -> f64 {
    if diffuse.is_empty() {
        return 0.0;
    }
    let mut sum = 0.0;
    for c in diffuse {
        for ch in 0..3 {
            let neg = c[ch].min(0.0);
            sum += neg * neg;
        }
    }
    sum / (3.0 * diffuse.len() as f64)
}

/// Eye-group opacity/visibility/scale penalty
/// `λ_es·mean(max(s−0.1,0)²) + λ_eo·mean((1−o)²) + λ_ev·mean((1−v̄)²)`
/// over eye Gaussians, where `o` is the opacity and `v̄` the visibility
/// gate of the DC view coefficient. Zero when the cloud has no eye groups.
pub fn reg_eye(cloud: &GaussianCloud, cfg: &FitConfig) -> f64 {
    let mut n = 0usize;
    let (mut s_sum, mut o_sum, mut v_sum) = (0.0, 0.0, 0.0);
    for (g, tp) in cloud.gaussians.iter().zip(&cloud.transfer) {
        if !g.group.is_eye() {
            continue;
        }
        n += 1;
        for s in g.scale().iter() {
            let over = (s - 0.1).max(0.0);
            s_sum += over * over;
        }
        let o = g.opacity();
        o_sum += (1.0 - o) * (1.0 - o);
        let vbar = sigmoid(tp.v_view[0] * Y00);
        v_sum += (1.0 - vbar) * (1.0 - vbar);
    }
    if n == 0 {
        return 0.0;
    }
    let nf = n as f64;
    cfg.lambda_eye_scale * s_sum / (3.0 * nf)
        + cfg.lambda_eye_opacity * o_sum / nf
        + cfg.lambda_eye_visibility * v_sum / nf
}

/// Adds the eye-penalty gradient to `grads` (same convention as
/// [`reg_eye`]).
fn reg_eye_grad(cloud: &GaussianCloud, cfg: &FitConfig, grads: &mut CloudGrads) {
    let n = cloud.gaussians.iter().filter(|g| g.group.is_eye()).count();
    if n == 0 {
        return;
    }
    let nf = n as f64;
    for (i, (g, tp)) in cloud.gaussians.iter().zip(&cloud.transfer).enumerate() {
        if !g.group.is_eye() {
            continue;
        }
        let s = g.scale();
        for ax in 0..3 {
            let over = (s[ax] - 0.1).max(0.0);
            // d/d log s = d/ds · s.
            grads.d_log_scale[i][ax] +=
                cfg.lambda_eye_scale * 2.0 * over * s[ax] / (3.0 * nf);
        }
        let o = g.opacity();
        grads.d_opacity_logit[i] +=
            cfg.lambda_eye_opacity * (-2.0 * (1.0 - o)) * o * (1.0 - o) / nf;
        let vbar = sigmoid(tp.v_view[0] * Y00);
        grads.d_transfer[i].v_view[0] +=
            cfg.lambda_eye_visibility * (-2.0 * (1.0 - vbar)) * vbar * (1.0 - vbar) * Y00 / nf;
    }
}

/// One frame's reconstruction + negative-color terms and their gradient.
fn frame_loss(
    cloud: &GaussianCloud,
    frame: &OlatFrame,
    cfg: &FitConfig,
) -> Result<(f64, f64, f64, CloudGrads)> {
    let cam = &frame.camera;
    let cam_center = -(cam.rotation.transpose() * cam.translation);
    let light_sh = frame.pattern.to_sh(LIGHT_ORDER);
    let ctx = ShadeContext::points(&light_sh, &frame.pattern, cam_center)?;

    let dirs = view_dirs(cloud, cam_center)?;
    let parts: Vec<(Rgb, Rgb)> =
        cloud.transfer.iter().zip(&dirs).map(|(tp, &w_o)| shade_parts(tp, &ctx, w_o)).collect();

    // Forward raster with the summed colors.
    let splats: Vec<Splat> = cloud
        .gaussians
        .iter()
        .enumerate()
        .filter_map(|(i, g)| {
            project_gaussian(g, parts[i].0 + parts[i].1, cam).map(|mut s| {
                s.index = i;
                s
            })
        })
        .collect();
    let splats = sort_splats(splats)?;
    let background = Rgb::zeros();
    let (pred, _alpha) = rasterize(&splats, cam.width, cam.height, background)?;

    let (l1, dssim, d_pred) = loss_rec_impl(&pred, &frame.image, cfg, true)?;
    let d_pred = d_pred.expect("gradient requested");

    // Negative-color penalty on the diffuse term of every Gaussian.
    let n3 = 3.0 * cloud.gaussians.len() as f64;
    let mut neg = 0.0;
    for (d, _) in &parts {
        for ch in 0..3 {
            let v = d[ch].min(0.0);
            neg += v * v;
        }
    }
    neg = cfg.lambda_negcolor * neg / n3;

    // Image gradient → screen-space splat gradients → per-Gaussian
    // geometry and color gradients.
    let zeros_alpha = ImageGray::new(cam.width, cam.height);
    let raster_grads =
        rasterize_backward(&splats, cam.width, cam.height, background, &d_pred, &zeros_alpha)?;

    let mut grads = CloudGrads::zeros_like(cloud);
    let mut d_full = vec![Rgb::zeros(); cloud.gaussians.len()];
    for (k, s) in splats.iter().enumerate() {
        let pg = project_backward(
            &cloud.gaussians[s.index],
            cam,
            raster_grads.d_mean2d[k],
            raster_grads.d_cov2d[k],
            raster_grads.d_alpha_base[k],
        );
        grads.d_pos[s.index] += pg.d_pos;
        grads.d_quat[s.index] += pg.d_quat;
        grads.d_log_scale[s.index] += pg.d_log_scale;
        grads.d_opacity_logit[s.index] += pg.d_opacity_logit;
        d_full[s.index] = raster_grads.d_color[k];
    }

    // Shading chain, including culled Gaussians: their diffuse color still
    // feeds the negative-color penalty.
    let neg_w = cfg.lambda_negcolor * 2.0 / n3;
    for i in 0..cloud.gaussians.len() {
        let d_extra = parts[i].0.map(|v| v.min(0.0)) * neg_w;
        let (tg, d_w_o) = shade_backward(&cloud.transfer[i], &ctx, dirs[i], d_full[i], d_extra);
        grads.d_transfer[i].add(&tg);
        let dist = (cam_center - cloud.gaussians[i].pos).norm();
        grads.d_pos[i] += view_dir_to_pos(d_w_o, dirs[i], dist);
    }

    Ok((l1, dssim, neg, grads))
}

/// Names the first gradient block containing a non-finite value.
fn scan_grads(grads: &CloudGrads) -> Option<&'static str> {
    let bad3 = |v: &Vec3| !v.iter().all(|x| x.is_finite());
    for i in 0..grads.d_pos.len() {
        if bad3(&grads.d_pos[i]) {
            return Some("position");
        }
        if !grads.d_quat[i].iter().all(|x| x.is_finite()) {
            return Some("rotation");
        }
        if bad3(&grads.d_log_scale[i]) {
            return Some("scale");
        }
        if !grads.d_opacity_logit[i].is_finite() {
            return Some("opacity");
        }
        let t = &grads.d_transfer[i];
        if bad3(&t.albedo) {
            return Some("albedo");
        }
        if t.d_c.iter().any(|c| bad3(c)) {
            return Some("color transfer");
        }
        if t.d_m.iter().any(|m| !m.is_finite()) {
            return Some("monochrome transfer");
        }
        if !t.rough_raw.is_finite() {
            return Some("roughness");
        }
        if bad3(&t.n_base) {
            return Some("base normal");
        }
        if t.dn_view.iter().any(bad3) {
            return Some("normal residual");
        }
        if t.v_view.iter().any(|v| !v.is_finite()) {
            return Some("visibility");
        }
        if let Some(av) = &t.albedo_view {
            if av.iter().any(|c| bad3(c)) {
                return Some("view albedo");
            }
        }
    }
    None
}

/// Batch objective and its gradient: reconstruction and negative-color
/// terms averaged over `frames`, plus the cloud-level regularizers.
/// `anchor` (when present) must hold one reference position per Gaussian.
pub fn total_loss(
    cloud: &GaussianCloud,
    frames: &[&OlatFrame],
    cfg: &FitConfig,
    anchor: Option<&[Vec3]>,
) -> Result<(LossBreakdown, CloudGrads)> {
    cfg.validate()?;
    if frames.is_empty() {
        return Err(Error::InvalidArgument("loss needs at least one frame".into()));
    }
    if let Some(a) = anchor {
        if a.len() != cloud.gaussians.len() {
            return Err(Error::InvalidArgument(format!(
                "{} anchor positions for {} gaussians",
                a.len(),
                cloud.gaussians.len()
            )));
        }
    }

    let per_frame: Result<Vec<_>> =
        frames.par_iter().map(|f| frame_loss(cloud, f, cfg)).collect();
    let per_frame = per_frame?;

    let inv = 1.0 / frames.len() as f64;
    let mut breakdown = LossBreakdown::default();
    let mut grads = CloudGrads::zeros_like(cloud);
    for (l1, dssim, neg, g) in &per_frame {
        breakdown.rec_l1 += l1 * inv;
        breakdown.rec_ssim += dssim * inv;
        breakdown.negcolor += neg * inv;
        grads.add(g);
    }
    grads.scale(inv);

    // Cloud-level terms (independent of the batch).
    breakdown.scale = cfg.lambda_scale * reg_scale(cloud);
    let n3 = 3.0 * cloud.gaussians.len() as f64;
    for (i, g) in cloud.gaussians.iter().enumerate() {
        let s = g.scale();
        for ax in 0..3 {
            let (_, dp) = scale_penalty(s[ax]);
            grads.d_log_scale[i][ax] += cfg.lambda_scale * dp * s[ax] / n3;
        }
    }

    breakdown.eye = reg_eye(cloud, cfg);
    reg_eye_grad(cloud, cfg, &mut grads);

    if let (Some(lambda), Some(refs)) = (cfg.lambda_anchor, anchor) {
        let n = cloud.gaussians.len() as f64;
        let mut sum = 0.0;
        for (i, (g, r)) in cloud.gaussians.iter().zip(refs).enumerate() {
            let d = g.pos - r;
            sum += d.norm_squared();
            grads.d_pos[i] += lambda * 2.0 * d / n;
        }
        breakdown.anchor = lambda * sum / n;
    }

    breakdown.total = breakdown.rec_l1
        + breakdown.rec_ssim
        + breakdown.negcolor
        + breakdown.scale
        + breakdown.eye
        + breakdown.anchor;

    if !breakdown.total.is_finite() {
        return Err(Error::NonFinite("total loss".into()));
    }
    if let Some(block) = scan_grads(&grads) {
        return Err(Error::NonFinite(format!("{block} gradient")));
    }
    Ok((breakdown, grads))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fitter::{synth_dataset, FitConfig, PatternKind};
    use crate::scene::presets::sphere_scene;
    use crate::scene::Group;

    fn tiny_dataset(cloud: &GaussianCloud) -> Vec<OlatFrame> {
        synth_dataset(cloud, 2, 3, PatternKind::Olat, 32, 32, 5).unwrap()
    }

    #[test]
    fn reconstruction_loss_is_zero_on_identity_and_linear_in_l1() {
        let cfg = FitConfig::default();
        let cloud = sphere_scene(40, 9);
        let frames = tiny_dataset(&cloud);
        let img = &frames[0].image;
        assert_eq!(loss_rec(img, img, &cfg).unwrap(), 0.0);

        // A uniform +0.1 offset puts the L1 part at exactly λ_l1·0.1 = 1.
        let off = img.map(|p| p + Rgb::repeat(0.1));
        let mut cfg_l1 = cfg.clone();
        cfg_l1.lambda_ssim = 0.0;
        let l = loss_rec(&off, img, &cfg_l1).unwrap();
        assert!((l - 1.0).abs() < 1e-12, "pure L1 part: {l}");
    }

    #[test]
    fn scale_penalty_matches_the_piecewise_formula() {
        let mut cloud = sphere_scene(4, 2);
        for g in &mut cloud.gaussians {
            g.log_scale = Vec3::new(5.0_f64.ln(), 5.0_f64.ln(), 5.0_f64.ln());
        }
        assert_eq!(reg_scale(&cloud), 0.0);

        // One axis at 0.05 contributes 1/0.05 = 20; one at 12 adds (12−10)².
        cloud.gaussians[0].log_scale.x = 0.05_f64.ln();
        cloud.gaussians[1].log_scale.y = 12.0_f64.ln();
        let expect = (20.0 + 4.0) / 12.0;
        assert!((reg_scale(&cloud) - expect).abs() < 1e-9);
    }

    #[test]
    fn negcolor_counts_only_negative_entries() {
        let n = 6;
        let mut colors = vec![Rgb::repeat(0.3); n];
        assert_eq!(reg_negcolor(&colors), 0.0);
        colors[2].y = -0.5;
        let expect = 0.25 / (3.0 * n as f64);
        assert!((reg_negcolor(&colors) - expect).abs() < 1e-12);
    }

    #[test]
    fn eye_penalty_is_zero_without_eyes_and_counts_transparency() {
        let cfg = FitConfig::default();
        let mut cloud = sphere_scene(6, 3);
        assert_eq!(reg_eye(&cloud, &cfg), 0.0);

        cloud.gaussians[0].group = Group::LeftEye;
        // Fully opaque, fully visible, small: penalty ~0.
        cloud.gaussians[0].opacity_logit = 40.0;
        cloud.gaussians[0].log_scale = Vec3::repeat(0.05_f64.ln());
        cloud.transfer[0].v_view[0] = 40.0 / Y00;
        assert!(reg_eye(&cloud, &cfg) < 1e-12);

        // Fully transparent: the opacity part contributes λ_eo per Gaussian.
        cloud.gaussians[0].opacity_logit = -40.0;
        let r = reg_eye(&cloud, &cfg);
        assert!(
            (r - cfg.lambda_eye_opacity).abs() < 1e-9,
            "transparent eye penalty {r}"
        );
    }

    #[test]
    fn perfect_prediction_with_inactive_regularizers_scores_zero() {
        let cloud = sphere_scene(40, 9);
        let frames = tiny_dataset(&cloud);
        let cfg =
            FitConfig { lambda_scale: 0.0, lambda_negcolor: 0.0, ..FitConfig::default() };
        let refs: Vec<&OlatFrame> = frames.iter().take(2).collect();
        let (breakdown, _) = total_loss(&cloud, &refs, &cfg, None).unwrap();
        assert!(
            breakdown.total.abs() < 1e-12,
            "self-consistency loss {}",
            breakdown.total
        );
    }

    #[test]
    fn zeroing_all_weights_but_l1_leaves_the_pure_l1_path() {
        let cloud = sphere_scene(30, 11);
        let frames = tiny_dataset(&cloud);
        let jittered = crate::scene::presets::jitter_cloud(&cloud, 0.05, 77);
        let cfg = FitConfig {
            lambda_ssim: 0.0,
            lambda_scale: 0.0,
            lambda_negcolor: 0.0,
            ..FitConfig::default()
        };
        let refs: Vec<&OlatFrame> = frames.iter().take(1).collect();
        let (breakdown, _) = total_loss(&jittered, &refs, &cfg, None).unwrap();
        assert_eq!(breakdown.rec_ssim, 0.0);
        assert_eq!(breakdown.negcolor, 0.0);
        assert_eq!(breakdown.scale, 0.0);
        assert!((breakdown.total - breakdown.rec_l1).abs() < 1e-15);
        assert!(breakdown.rec_l1 > 0.0);
    }

    #[test]
    fn anchor_term_pulls_positions_toward_the_reference() {
        let cloud = sphere_scene(10, 21);
        let frames = tiny_dataset(&cloud);
        let moved = {
            let mut c = cloud.clone();
            c.gaussians[0].pos += Vec3::new(0.2, 0.0, 0.0);
            c
        };
        let anchors: Vec<Vec3> = cloud.gaussians.iter().map(|g| g.pos).collect();
        let cfg = FitConfig { lambda_anchor: Some(1.0), ..FitConfig::default() };
        let refs: Vec<&OlatFrame> = frames.iter().take(1).collect();
        let (breakdown, grads) = total_loss(&moved, &refs, &cfg, Some(&anchors)).unwrap();
        let expect = 0.2 * 0.2 / 10.0;
        assert!((breakdown.anchor - expect).abs() < 1e-12);
        // Gradient on the displaced Gaussian points along +x with slope 2λd/N.
        let anchor_part = 2.0 * 0.2 / 10.0;
        assert!(grads.d_pos[0].x > anchor_part * 0.5);

        // Missing anchors with the λ set simply disables the term.
        let (b2, _) = total_loss(&moved, &refs, &cfg, None).unwrap();
        assert_eq!(b2.anchor, 0.0);
    }

    #[test]
    fn reports_the_offending_block_on_non_finite_parameters() {
        let mut cloud = sphere_scene(10, 13);
        let frames = tiny_dataset(&cloud);
        cloud.transfer[3].albedo.x = f64::NAN;
        let refs: Vec<&OlatFrame> = frames.iter().take(1).collect();
        let err = total_loss(&cloud, &refs, &FitConfig::default(), None).unwrap_err();
        let msg = err.to_string();
        assert!(
            msg.contains("loss") || msg.contains("gradient"),
            "unexpected error message: {msg}"
        );
    }
}
