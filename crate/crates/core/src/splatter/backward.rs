//! Reverse-mode derivatives of the splatting pipeline.
//!
//! [`rasterize_backward`] replays the forward compositing per pixel and
//! pushes image gradients back to each splat's screen-space parameters;
//! [`project_backward`] continues the chain from screen space to the
//! source Gaussian's position, orientation, scale and opacity. The
//! compositing order is treated as a constant of the forward pass.

use rayon::prelude::*;

use super::{
    perspective_jacobian, prepare, Camera, Splat, ALPHA_MAX, NEAR_PLANE, TILE,
    TRANSMITTANCE_EPS,
};
use crate::image::{ImageGray, ImageRgb};
use crate::scene::{covariance, Gaussian};
use crate::{Error, Mat2, Mat3, Result, Rgb, Vec2, Vec3, Vec4};

/// Per-splat gradients of a scalar loss, aligned with the splat list that
/// was rasterized. `d_cov2d` is the full-matrix gradient: the sensitivity
/// to a symmetric perturbation of the off-diagonal is the sum of its two
/// (equal) entries.
#[derive(Clone, Debug)]
pub struct RasterGrads {
    pub d_mean2d: Vec<Vec2>,
    pub d_cov2d: Vec<Mat2>,
    pub d_color: Vec<Rgb>,
    pub d_alpha_base: Vec<f64>,
}

impl RasterGrads {
    fn zeros(n: usize) -> RasterGrads {
        RasterGrads {
            d_mean2d: vec![Vec2::zeros(); n],
            d_cov2d: vec![Mat2::zeros(); n],
            d_color: vec![Rgb::zeros(); n],
            d_alpha_base: vec![0.0; n],
        }
    }
}

/// One surviving contribution recorded during per-pixel replay.
struct Entry {
    /// Position in the tile's bin (indexes the local accumulators).
    slot: u32,
    alpha: f64,
    /// Transmittance in front of this contribution.
    t_before: f64,
}

/// Local accumulators for one splat within one tile.
#[derive(Clone)]
struct SplatAcc {
    d_mean: Vec2,
    /// Gradient w.r.t. the conic (inverse covariance), full matrix.
    d_conic: Mat2,
    d_color: Rgb,
    d_alpha_base: f64,
}

impl SplatAcc {
    fn zero() -> SplatAcc {
        SplatAcc {
            d_mean: Vec2::zeros(),
            d_conic: Mat2::zeros(),
            d_color: Rgb::zeros(),
            d_alpha_base: 0.0,
        }
    }
}

/// Pushes pixel-space gradients (`grad_color` per channel, `grad_alpha`
/// for the coverage image) back to every splat. The splat list and
/// background must be exactly those given to the forward rasterizer.
pub fn rasterize_backward(
    splats: &[Splat],
    width: usize,
    height: usize,
    background: Rgb,
    grad_color: &ImageRgb,
    grad_alpha: &ImageGray,
) -> Result<RasterGrads> {
    super::check_size(width, height)?;
    if grad_color.width() != width
        || grad_color.height() != height
        || grad_alpha.width() != width
        || grad_alpha.height() != height
    {
        return Err(Error::InvalidArgument(
            "gradient images must match the rendered size".into(),
        ));
    }
    let prepared = prepare(splats, width, height);
    let tiles_x = width.div_ceil(TILE);
    let tiles_y = height.div_ceil(TILE);
    let mut bins: Vec<Vec<u32>> = vec![Vec::new(); tiles_x * tiles_y];
    for (i, p) in prepared.iter().enumerate() {
        if p.px.0 > p.px.1 || p.py.0 > p.py.1 {
            continue;
        }
        let (tx0, tx1) = (p.px.0 as usize / TILE, p.px.1 as usize / TILE);
        let (ty0, ty1) = (p.py.0 as usize / TILE, p.py.1 as usize / TILE);
        for ty in ty0..=ty1 {
            for tx in tx0..=tx1 {
                bins[ty * tiles_x + tx].push(i as u32);
            }
        }
    }

    let tile_grads: Vec<Vec<SplatAcc>> = (0..tiles_x * tiles_y)
        .into_par_iter()
        .map(|tile| {
            let (tx, ty) = (tile % tiles_x, tile / tiles_x);
            let bin = &bins[tile];
            let mut acc = vec![SplatAcc::zero(); bin.len()];
            let mut entries: Vec<Entry> = Vec::new();
            for iy in ty * TILE..(ty * TILE + TILE).min(height) {
                for ix in tx * TILE..(tx * TILE + TILE).min(width) {
                    let x = ix as f64 + 0.5;
                    let y = iy as f64 + 0.5;

                    // Replay the forward scan, mirroring the compositing
                    // loop contribution for contribution.
                    entries.clear();
                    let mut transmittance = 1.0;
                    for (slot, &i) in bin.iter().enumerate() {
                        let p = &prepared[i as usize];
                        let dx = x - p.mean.x;
                        let dy = y - p.mean.y;
                        let q = p.conic.0 * dx * dx
                            + 2.0 * p.conic.1 * dx * dy
                            + p.conic.2 * dy * dy;
                        if q > p.q_cut {
                            continue;
                        }
                        let alpha = p.alpha_base * (-0.5 * q).exp();
                        entries.push(Entry { slot: slot as u32, alpha, t_before: transmittance });
                        transmittance *= 1.0 - alpha;
                        if transmittance < TRANSMITTANCE_EPS {
                            break;
                        }
                    }
                    let t_end = transmittance;

                    let g_c = grad_color.get(ix, iy);
                    let g_a = grad_alpha.get(ix, iy);

                    // Walk contributions back to front. `suffix` holds
                    // Σ_{j>k} c_j·α_j·T_j, the part of the pixel color
                    // that still passes through contribution k.
                    let mut suffix = Rgb::zeros();
                    for e in entries.iter().rev() {
                        let p = &prepared[bin[e.slot as usize] as usize];
                        let a = &mut acc[e.slot as usize];
                        let weight = e.alpha * e.t_before;
                        a.d_color += g_c * weight;

                        let occluded = suffix + background * t_end;
                        let d_c_d_alpha = p.color * e.t_before - occluded / (1.0 - e.alpha);
                        let d_a_d_alpha = t_end / (1.0 - e.alpha);
                        let g_alpha = g_c.dot(&d_c_d_alpha) + g_a * d_a_d_alpha;

                        // α = alpha_base·exp(−q/2)
                        a.d_alpha_base += g_alpha * e.alpha / p.alpha_base;
                        let g_q = g_alpha * (-0.5 * e.alpha);
                        let dx = x - p.mean.x;
                        let dy = y - p.mean.y;
                        a.d_mean.x += g_q * (-2.0 * (p.conic.0 * dx + p.conic.1 * dy));
                        a.d_mean.y += g_q * (-2.0 * (p.conic.1 * dx + p.conic.2 * dy));
                        a.d_conic += Mat2::new(dx * dx, dx * dy, dx * dy, dy * dy) * g_q;

                        suffix += p.color * weight;
                    }
                }
            }
            acc
        })
        .collect();

    // Merge tiles in index order so the reduction is deterministic, and
    // convert conic gradients through the matrix inverse:
    // K = M⁻¹ ⇒ ∂L/∂M = −K·(∂L/∂K)·K.
    let mut grads = RasterGrads::zeros(splats.len());
    for (tile, acc) in tile_grads.into_iter().enumerate() {
        for (slot, a) in acc.into_iter().enumerate() {
            let i = bins[tile][slot] as usize;
            grads.d_mean2d[i] += a.d_mean;
            grads.d_color[i] += a.d_color;
            grads.d_alpha_base[i] += a.d_alpha_base;
            let p = &prepared[i];
            let k = Mat2::new(p.conic.0, p.conic.1, p.conic.1, p.conic.2);
            grads.d_cov2d[i] += -k * a.d_conic * k;
        }
    }
    Ok(grads)
}

/// Gradients of a scalar loss w.r.t. one Gaussian's optimizable fields.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ProjectionGrads {
    pub d_pos: Vec3,
    pub d_quat: Vec4,
    pub d_log_scale: Vec3,
    pub d_opacity_logit: f64,
}

impl ProjectionGrads {
    pub fn zeros() -> ProjectionGrads {
        ProjectionGrads::default()
    }
}

/// Partial derivatives of the rotation matrix w.r.t. the unit-quaternion
/// components (w, x, y, z), matching [`crate::scene::quat_to_rot`].
fn rot_quat_partials(w: f64, x: f64, y: f64, z: f64) -> [Mat3; 4] {
    [
        Mat3::new(0.0, -z, y, z, 0.0, -x, -y, x, 0.0) * 2.0,
        Mat3::new(0.0, y, z, y, -2.0 * x, -w, z, w, -2.0 * x) * 2.0,
        Mat3::new(-2.0 * y, x, w, x, 0.0, z, -w, z, -2.0 * y) * 2.0,
        Mat3::new(-2.0 * z, -w, x, w, -2.0 * z, y, x, y, 0.0) * 2.0,
    ]
}

/// Chains screen-space gradients of one projected splat back to the
/// source Gaussian. `d_cov2d` uses the full-matrix convention of
/// [`RasterGrads`]. Gaussians the camera culled get zero gradients.
pub fn project_backward(
    g: &Gaussian,
    cam: &Camera,
    d_mean2d: Vec2,
    d_cov2d: Mat2,
    d_alpha_base: f64,
) -> ProjectionGrads {
    let t = cam.rotation * g.pos + cam.translation;
    if t.z <= NEAR_PLANE || t.z.is_nan() {
        return ProjectionGrads::zeros();
    }
    let j = perspective_jacobian(cam, t);
    let a = j * cam.rotation;
    let sigma = covariance(g);

    // cov2d = A·Σ·Aᵀ + εI
    let d_a = (d_cov2d + d_cov2d.transpose()) * a * sigma;
    let d_sigma = a.transpose() * d_cov2d * a;

    // mean2d = (cx, cy) + (fx·tx, fy·ty)/tz: the Jacobian of the pixel
    // position w.r.t. t is exactly J.
    let mut d_t = j.transpose() * d_mean2d;

    // A = J·W with J itself a function of t.
    let d_j = d_a * cam.rotation.transpose();
    let inv_z2 = 1.0 / (t.z * t.z);
    let inv_z3 = inv_z2 / t.z;
    d_t.x += d_j[(0, 2)] * (-cam.fx * inv_z2);
    d_t.y += d_j[(1, 2)] * (-cam.fy * inv_z2);
    d_t.z += d_j[(0, 0)] * (-cam.fx * inv_z2)
        + d_j[(1, 1)] * (-cam.fy * inv_z2)
        + d_j[(0, 2)] * (2.0 * cam.fx * t.x * inv_z3)
        + d_j[(1, 2)] * (2.0 * cam.fy * t.y * inv_z3);

    let d_pos = cam.rotation.transpose() * d_t;

    // Σ = R·diag(s²)·Rᵀ
    let r = g.rotation();
    let s2 = g.scale().map(|s| s * s);
    let d_r = (d_sigma + d_sigma.transpose()) * r * Mat3::from_diagonal(&s2);
    let rt_ds_r = r.transpose() * d_sigma * r;
    let d_log_scale = Vec3::new(
        rt_ds_r[(0, 0)] * 2.0 * s2.x,
        rt_ds_r[(1, 1)] * 2.0 * s2.y,
        rt_ds_r[(2, 2)] * 2.0 * s2.z,
    );

    // R(q/|q|): contract with ∂R/∂(unit components), then push through
    // the normalization. Storage order is (w, x, y, z).
    let n = g.quat.norm();
    let u = g.quat / n;
    let partials = rot_quat_partials(u.x, u.y, u.z, u.w);
    let d_unit = Vec4::new(
        d_r.component_mul(&partials[0]).sum(),
        d_r.component_mul(&partials[1]).sum(),
        d_r.component_mul(&partials[2]).sum(),
        d_r.component_mul(&partials[3]).sum(),
    );
    let d_quat = (d_unit - u * u.dot(&d_unit)) / n;

    // alpha_base = min(sigmoid(logit), ALPHA_MAX): flat past the clamp.
    let s = g.opacity();
    let d_opacity_logit =
        if s >= ALPHA_MAX { 0.0 } else { d_alpha_base * s * (1.0 - s) };

    ProjectionGrads { d_pos, d_quat, d_log_scale, d_opacity_logit }
}

#[cfg(test)]
mod tests {
    use super::super::{project_gaussian, rasterize, sort_splats};
    use super::*;
    use crate::scene::Group;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Scalar loss fully determined by fixed weight images: its exact
    /// gradient images are the weights themselves.
    fn weighted_loss(
        img: &ImageRgb,
        alpha: &ImageGray,
        w_color: &ImageRgb,
        w_alpha: &ImageGray,
    ) -> f64 {
        let mut l = 0.0;
        for (p, w) in img.pixels().iter().zip(w_color.pixels()) {
            l += p.dot(w);
        }
        for (a, w) in alpha.pixels().iter().zip(w_alpha.pixels()) {
            l += a * w;
        }
        l
    }

    fn weight_images(w: usize, h: usize, seed: u64) -> (ImageRgb, ImageGray) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut wc = ImageRgb::new(w, h);
        let mut wa = ImageGray::new(w, h);
        for p in wc.pixels_mut() {
            *p = Rgb::new(
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            );
        }
        for a in wa.pixels_mut() {
            *a = rng.gen_range(-1.0..1.0);
        }
        (wc, wa)
    }

    fn test_splats(seed: u64) -> Vec<Splat> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..6)
            .map(|i| {
                let xx: f64 = rng.gen_range(2.0..6.0);
                let yy: f64 = rng.gen_range(2.0..6.0);
                let xy = rng.gen_range(-0.5..0.5) * (xx * yy).sqrt() * 0.5;
                Splat {
                    mean2d: Vec2::new(rng.gen_range(6.0..18.0), rng.gen_range(6.0..18.0)),
                    cov2d: Mat2::new(xx, xy, xy, yy),
                    depth: 1.0 + i as f64,
                    color: Rgb::new(rng.gen(), rng.gen(), rng.gen()),
                    alpha_base: rng.gen_range(0.2..0.8),
                    index: i,
                }
            })
            .collect()
    }

    #[test]
    fn rasterize_backward_matches_finite_differences() {
        let (w, h) = (24, 24);
        let bg = Rgb::new(0.15, 0.1, 0.2);
        let splats = test_splats(77);
        let (wc, wa) = weight_images(w, h, 78);
        let loss = |s: &[Splat]| {
            let (img, alpha) = rasterize(s, w, h, bg).unwrap();
            weighted_loss(&img, &alpha, &wc, &wa)
        };

        let grads = rasterize_backward(&splats, w, h, bg, &wc, &wa).unwrap();

        let fd = |mutate: &dyn Fn(&mut Splat, f64), i: usize, step: f64| {
            let mut plus = splats.clone();
            mutate(&mut plus[i], step);
            let mut minus = splats.clone();
            mutate(&mut minus[i], -step);
            (loss(&plus) - loss(&minus)) / (2.0 * step)
        };
        let check = |got: f64, want: f64, what: &str| {
            let tol = 1e-5 * want.abs().max(1e-2);
            assert!((got - want).abs() < tol, "{what}: analytic {got} vs fd {want}");
        };

        let h_step = 1e-5;
        for i in 0..splats.len() {
            check(grads.d_mean2d[i].x, fd(&|s, e| s.mean2d.x += e, i, h_step), "mean.x");
            check(grads.d_mean2d[i].y, fd(&|s, e| s.mean2d.y += e, i, h_step), "mean.y");
            check(
                grads.d_cov2d[i][(0, 0)],
                fd(&|s, e| s.cov2d[(0, 0)] += e, i, h_step),
                "cov.xx",
            );
            check(
                grads.d_cov2d[i][(1, 1)],
                fd(&|s, e| s.cov2d[(1, 1)] += e, i, h_step),
                "cov.yy",
            );
            // Symmetric perturbation of both off-diagonal slots.
            check(
                grads.d_cov2d[i][(0, 1)] + grads.d_cov2d[i][(1, 0)],
                fd(
                    &|s, e| {
                        s.cov2d[(0, 1)] += e;
                        s.cov2d[(1, 0)] += e;
                    },
                    i,
                    h_step,
                ),
                "cov.xy",
            );
            for c in 0..3 {
                check(grads.d_color[i][c], fd(&|s, e| s.color[c] += e, i, h_step), "color");
            }
            check(
                grads.d_alpha_base[i],
                fd(&|s, e| s.alpha_base += e, i, h_step),
                "alpha_base",
            );
        }
    }

    fn random_gaussian(rng: &mut ChaCha8Rng) -> Gaussian {
        let q = Vec4::new(
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
        );
        Gaussian {
            pos: Vec3::new(
                rng.gen_range(-0.5..0.5),
                rng.gen_range(-0.5..0.5),
                rng.gen_range(7.0..11.0),
            ),
            quat: q * rng.gen_range(0.5..2.0),
            log_scale: Vec3::new(
                rng.gen_range(0.04f64..0.2).ln(),
                rng.gen_range(0.04f64..0.2).ln(),
                rng.gen_range(0.04f64..0.2).ln(),
            ),
            opacity_logit: rng.gen_range(-1.0..1.5),
            group: Group::Head,
        }
    }

    #[test]
    fn project_backward_matches_finite_differences() {
        let cam = Camera::new(
            110.0,
            95.0,
            32.0,
            24.0,
            64,
            48,
            Mat3::identity(),
            Vec3::zeros(),
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let w_mean = Vec2::new(0.7, -0.3);
        let w_cov = Mat2::new(0.4, -0.2, 0.1, 0.6);
        let w_alpha = 0.9;
        // Scalar probe contracting every splat output with fixed weights.
        let probe = |g: &Gaussian| {
            let s = project_gaussian(g, Rgb::zeros(), &cam).expect("projects");
            w_mean.dot(&s.mean2d)
                + w_cov.component_mul(&s.cov2d).sum()
                + w_alpha * s.alpha_base
        };

        for _ in 0..4 {
            let g = random_gaussian(&mut rng);
            let grads = project_backward(&g, &cam, w_mean, w_cov, w_alpha);
            let step = 1e-6;
            let fd = |mutate: &dyn Fn(&mut Gaussian, f64)| {
                let mut plus = g.clone();
                mutate(&mut plus, step);
                let mut minus = g.clone();
                mutate(&mut minus, -step);
                (probe(&plus) - probe(&minus)) / (2.0 * step)
            };
            let check = |got: f64, want: f64, what: &str| {
                let tol = 2e-5 * want.abs().max(1.0);
                assert!((got - want).abs() < tol, "{what}: analytic {got} vs fd {want}");
            };
            for k in 0..3 {
                check(grads.d_pos[k], fd(&|g, e| g.pos[k] += e), "pos");
                check(grads.d_log_scale[k], fd(&|g, e| g.log_scale[k] += e), "log_scale");
            }
            for k in 0..4 {
                check(grads.d_quat[k], fd(&|g, e| g.quat[k] += e), "quat");
            }
            check(grads.d_opacity_logit, fd(&|g, e| g.opacity_logit += e), "opacity");
        }
    }

    #[test]
    fn clamped_opacity_gets_zero_gradient() {
        let cam = Camera::new(
            100.0,
            100.0,
            32.0,
            32.0,
            64,
            64,
            Mat3::identity(),
            Vec3::zeros(),
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut g = random_gaussian(&mut rng);
        g.opacity_logit = 10.0; // sigmoid ≈ 0.99995 > ALPHA_MAX
        let grads = project_backward(&g, &cam, Vec2::zeros(), Mat2::zeros(), 1.0);
        assert_eq!(grads.d_opacity_logit, 0.0);

        // Behind the camera: everything is culled, so nothing flows back.
        g.pos.z = -4.0;
        let grads = project_backward(&g, &cam, Vec2::new(1.0, 1.0), Mat2::identity(), 1.0);
        assert_eq!(grads, ProjectionGrads::zeros());
    }

    #[test]
    fn end_to_end_gradients_flow_through_projection() {
        let cam = Camera::new(
            90.0,
            90.0,
            16.0,
            16.0,
            32,
            32,
            Mat3::identity(),
            Vec3::zeros(),
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let gaussians: Vec<Gaussian> = (0..3)
            .map(|i| {
                let mut g = random_gaussian(&mut rng);
                g.pos.z = 8.0 + 0.7 * i as f64; // well-separated depths
                g.log_scale = Vec3::repeat(rng.gen_range(0.25f64..0.5).ln());
                g
            })
            .collect();
        let colors = [
            Rgb::new(0.9, 0.2, 0.1),
            Rgb::new(0.1, 0.8, 0.3),
            Rgb::new(0.2, 0.3, 0.9),
        ];
        let bg = Rgb::repeat(0.1);
        let (wc, wa) = weight_images(32, 32, 22);

        let forward = |gs: &[Gaussian]| {
            let splats: Vec<Splat> = gs
                .iter()
                .enumerate()
                .filter_map(|(i, g)| {
                    project_gaussian(g, colors[i], &cam).map(|mut s| {
                        s.index = i;
                        s
                    })
                })
                .collect();
            sort_splats(splats).unwrap()
        };

        let loss = |gs: &[Gaussian]| {
            let splats = forward(gs);
            let (img, alpha) = rasterize(&splats, 32, 32, bg).unwrap();
            weighted_loss(&img, &alpha, &wc, &wa)
        };

        let splats = forward(&gaussians);
        assert_eq!(splats.len(), 3, "all three should be visible");
        let raster = rasterize_backward(&splats, 32, 32, bg, &wc, &wa).unwrap();
        let mut grads = vec![ProjectionGrads::zeros(); 3];
        for (k, s) in splats.iter().enumerate() {
            grads[s.index] = project_backward(
                &gaussians[s.index],
                &cam,
                raster.d_mean2d[k],
                raster.d_cov2d[k],
                raster.d_alpha_base[k],
            );
        }

        let step = 1e-5;
        let fd = |mutate: &dyn Fn(&mut Vec<Gaussian>, f64)| {
            let mut plus = gaussians.clone();
            mutate(&mut plus, step);
            let mut minus = gaussians.clone();
            mutate(&mut minus, -step);
            (loss(&plus) - loss(&minus)) / (2.0 * step)
        };
        let check = |got: f64, want: f64, what: &str| {
            let tol = 1e-4 * want.abs().max(1e-2);
            assert!((got - want).abs() < tol, "{what}: analytic {got} vs fd {want}");
        };

        for i in 0..3 {
            for k in 0..3 {
                check(grads[i].d_pos[k], fd(&|gs, e| gs[i].pos[k] += e), "pos");
                check(
                    grads[i].d_log_scale[k],
                    fd(&|gs, e| gs[i].log_scale[k] += e),
                    "log_scale",
                );
            }
            for k in 0..4 {
                check(grads[i].d_quat[k], fd(&|gs, e| gs[i].quat[k] += e), "quat");
            }
            check(
                grads[i].d_opacity_logit,
                fd(&|gs, e| gs[i].opacity_logit += e),
                "opacity",
            );
        }
    }
}
