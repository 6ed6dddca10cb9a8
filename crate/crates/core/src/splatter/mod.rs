//! Camera model, EWA projection of 3D Gaussians to screen-space splats,
//! and tiled front-to-back alpha compositing (forward and reverse mode).

mod backward;

pub use backward::{project_backward, rasterize_backward, ProjectionGrads, RasterGrads};

use rayon::prelude::*;

use crate::image::{ImageGray, ImageRgb};
use crate::scene::{covariance, Gaussian, GaussianCloud};
use crate::{Error, Mat2, Mat3, Result, Rgb, Vec2, Vec3};

/// Low-pass regularization added to projected covariance diagonals (px²):
/// keeps sub-pixel splats from aliasing and inverses well-conditioned.
pub const COV2D_LOW_PASS: f64 = 0.3;
/// Compositing alphas are clamped to this so transmittance never reaches
/// exactly zero (keeps gradients finite while fitting).
pub const ALPHA_MAX: f64 = 0.999;
/// Per-splat extinction threshold: contributions with `α < 1e-7` are
/// treated as exactly zero. Both rasterization paths share the cutoff, so
/// tile binning changes nothing but the amount of skipped work.
pub const ALPHA_CUTOFF: f64 = 1e-7;
/// Front-to-back compositing stops once transmittance drops below this.
pub const TRANSMITTANCE_EPS: f64 = 1e-4;
/// Rasterizer tile edge in pixels.
pub const TILE: usize = 16;
/// Gaussians at or in front of this camera-space depth are culled.
pub const NEAR_PLANE: f64 = 1e-3;

/// Pinhole camera: `x_cam = R·x_world + t`, pixel `u = cx + fx·x/z`,
/// `v = cy + fy·y/z`. Pixel `(ix, iy)` covers the unit square centered at
/// `(ix + ½, iy + ½)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Camera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    /// World-to-camera rotation (rows are the camera axes in world space).
    pub rotation: Mat3,
    /// World-to-camera translation.
    pub translation: Vec3,
}

impl Camera {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        width: usize,
        height: usize,
        rotation: Mat3,
        translation: Vec3,
    ) -> Result<Camera> {
        let cam = Camera { fx, fy, cx, cy, width, height, rotation, translation };
        cam.validate()?;
        Ok(cam)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) || !self.fx.is_finite() || !self.fy.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "focal lengths must be positive, got ({}, {})",
                self.fx, self.fy
            )));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::InvalidArgument(format!(
                "image size must be nonzero, got {}×{}",
                self.width, self.height
            )));
        }
        let gram = self.rotation.transpose() * self.rotation;
        let drift = (gram - Mat3::identity()).abs().max();
        if drift > 1e-9 {
            return Err(Error::InvalidArgument(format!(
                "camera rotation is not orthonormal (|RᵀR − I| = {drift:.2e})"
            )));
        }
        if self.rotation.determinant() < 0.0 {
            return Err(Error::InvalidArgument(
                "camera rotation is a reflection (negative determinant)".into(),
            ));
        }
        Ok(())
    }

    /// Camera placed at `eye` looking toward `target`; image y runs down.
    pub fn look_at(
        eye: Vec3,
        target: Vec3,
        up: Vec3,
        fx: f64,
        width: usize,
        height: usize,
    ) -> Result<Camera> {
        let forward = target - eye;
        if forward.norm() < 1e-12 {
            return Err(Error::InvalidArgument("camera eye and target coincide".into()));
        }
        let z = forward.normalize();
        let x = z.cross(&up);
        if x.norm() < 1e-9 {
            return Err(Error::InvalidArgument("camera view direction is parallel to up".into()));
        }
        let x = x.normalize();
        let y = z.cross(&x);
        let rotation = Mat3::from_rows(&[x.transpose(), y.transpose(), z.transpose()]);
        let translation = -rotation * eye;
        Camera::new(
            fx,
            fx,
            width as f64 / 2.0,
            height as f64 / 2.0,
            width,
            height,
            rotation,
            translation,
        )
    }

    /// Camera position in world space (`−Rᵀt`).
    pub fn center(&self) -> Vec3 {
        -self.rotation.transpose() * self.translation
    }
}

/// A projected Gaussian ready for compositing.
#[derive(Clone, Debug)]
pub struct Splat {
    /// Projected center in pixel coordinates.
    pub mean2d: Vec2,
    /// Projected covariance (symmetric, low-pass regularized).
    pub cov2d: Mat2,
    /// Camera-space depth of the center (sort key).
    pub depth: f64,
    /// Final shaded color.
    pub color: Rgb,
    /// Peak opacity, clamped to [`ALPHA_MAX`].
    pub alpha_base: f64,
    /// Index of the source Gaussian in its cloud.
    pub index: usize,
}

/// Perspective Jacobian at camera-space position `t`.
fn perspective_jacobian(cam: &Camera, t: Vec3) -> nalgebra::Matrix2x3<f64> {
    let inv_z = 1.0 / t.z;
    nalgebra::Matrix2x3::new(
        cam.fx * inv_z,
        0.0,
        -cam.fx * t.x * inv_z * inv_z,
        0.0,
        cam.fy * inv_z,
        -cam.fy * t.y * inv_z * inv_z,
    )
}

/// Squared Mahalanobis radius beyond which a splat's contribution falls
/// under [`ALPHA_CUTOFF`] and is treated as exactly zero.
fn cutoff_radius_sq(alpha_base: f64) -> f64 {
    2.0 * (alpha_base / ALPHA_CUTOFF).ln()
}

/// Projects one Gaussian through the camera (EWA): mean by perspective,
/// covariance by `Σ' = J·W·Σ·Wᵀ·Jᵀ + ε·I` with `J` the perspective
/// Jacobian at the camera-space center and `W` the world-to-camera
/// rotation. Returns `None` when the center is at/behind the near plane,
/// the peak opacity is below the extinction cutoff, or the cutoff
/// ellipse's bounding box misses the image.
pub fn project_gaussian(g: &Gaussian, color: Rgb, cam: &Camera) -> Option<Splat> {
    let t = cam.rotation * g.pos + cam.translation;
    if t.z <= NEAR_PLANE || t.z.is_nan() {
        return None;
    }
    let alpha_base = g.opacity().min(ALPHA_MAX);
    if alpha_base <= ALPHA_CUTOFF {
        return None;
    }
    let j = perspective_jacobian(cam, t);
    let a = j * cam.rotation;
    let cov2d = a * covariance(g) * a.transpose() + Mat2::identity() * COV2D_LOW_PASS;
    let mean2d = Vec2::new(cam.cx + cam.fx * t.x / t.z, cam.cy + cam.fy * t.y / t.z);

    let q_cut = cutoff_radius_sq(alpha_base);
    let rx = (q_cut * cov2d[(0, 0)]).sqrt();
    let ry = (q_cut * cov2d[(1, 1)]).sqrt();
    let (w, h) = (cam.width as f64, cam.height as f64);
    if mean2d.x + rx < 0.0 || mean2d.x - rx > w || mean2d.y + ry < 0.0 || mean2d.y - ry > h {
        return None;
    }
    // The source index is assigned by the caller once it knows it.
    Some(Splat { mean2d, cov2d, depth: t.z, color, alpha_base, index: 0 })
}

/// Sorts splats front-to-back by center depth; ties keep input order.
/// Non-finite depths are rejected with the offending position.
pub fn sort_splats(mut splats: Vec<Splat>) -> Result<Vec<Splat>> {
    for (i, s) in splats.iter().enumerate() {
        if !s.depth.is_finite() {
            return Err(Error::NonFinite(format!("depth of splat {i}")));
        }
    }
    splats.sort_by(|a, b| a.depth.total_cmp(&b.depth));
    Ok(splats)
}

/// A splat with its inverse covariance and pixel bounds precomputed.
struct Prepared {
    mean: Vec2,
    /// Inverse covariance entries (a, b, c) for q = a·dx² + 2b·dx·dy + c·dy².
    conic: (f64, f64, f64),
    q_cut: f64,
    color: Rgb,
    alpha_base: f64,
    /// Inclusive pixel-index bounds of the cutoff ellipse's bounding box.
    px: (i64, i64),
    py: (i64, i64),
}

fn prepare(splats: &[Splat], width: usize, height: usize) -> Vec<Prepared> {
    splats
        .iter()
        .map(|s| {
            let (xx, xy, yy) = (s.cov2d[(0, 0)], s.cov2d[(0, 1)], s.cov2d[(1, 1)]);
            let det = xx * yy - xy * xy;
            let conic = (yy / det, -xy / det, xx / det);
            let q_cut = cutoff_radius_sq(s.alpha_base);
            let rx = (q_cut * xx).sqrt();
            let ry = (q_cut * yy).sqrt();
            // Pixel ix covers centers at ix + ½.
            let px0 = (s.mean2d.x - rx - 0.5).ceil().max(0.0) as i64;
            let px1 = (s.mean2d.x + rx - 0.5).floor().min(width as f64 - 1.0) as i64;
            let py0 = (s.mean2d.y - ry - 0.5).ceil().max(0.0) as i64;
            let py1 = (s.mean2d.y + ry - 0.5).floor().min(height as f64 - 1.0) as i64;
            Prepared {
                mean: s.mean2d,
                conic,
                q_cut,
                color: s.color,
                alpha_base: s.alpha_base,
                px: (px0, px1),
                py: (py0, py1),
            }
        })
        .collect()
}

/// Front-to-back over-compositing of `splats` (already in compositing
/// order) at one pixel center. Identical arithmetic for the naive and
/// tiled paths: contributions beyond each splat's cutoff radius are
/// skipped outright, and the scan stops once transmittance falls under
/// [`TRANSMITTANCE_EPS`].
#[inline]
fn composite_pixel<'a>(
    ordered: impl Iterator<Item = &'a Prepared>,
    x: f64,
    y: f64,
    background: Rgb,
) -> (Rgb, f64) {
    let mut color = Rgb::zeros();
    let mut transmittance = 1.0;
    for p in ordered {
        let dx = x - p.mean.x;
        let dy = y - p.mean.y;
        let q = p.conic.0 * dx * dx + 2.0 * p.conic.1 * dx * dy + p.conic.2 * dy * dy;
        if q > p.q_cut {
            continue;
        }
        let alpha = p.alpha_base * (-0.5 * q).exp();
        color += p.color * (alpha * transmittance);
        transmittance *= 1.0 - alpha;
        if transmittance < TRANSMITTANCE_EPS {
            break;
        }
    }
    (color + background * transmittance, 1.0 - transmittance)
}

fn check_size(width: usize, height: usize) -> Result<()> {
    if width == 0 || height == 0 {
        return Err(Error::InvalidArgument(format!("cannot rasterize a {width}×{height} image")));
    }
    Ok(())
}

/// Tiled rasterizer: splats are binned to all 16×16 tiles intersecting
/// their cutoff-ellipse bounding box; tiles run in parallel and own their
/// pixels. Output is identical to [`rasterize_naive`] bit for bit.
pub fn rasterize(
    splats: &[Splat],
    width: usize,
    height: usize,
    background: Rgb,
) -> Result<(ImageRgb, ImageGray)> {
    check_size(width, height)?;
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

    let blocks: Vec<Vec<(Rgb, f64)>> = (0..tiles_x * tiles_y)
        .into_par_iter()
        .map(|tile| {
            let (tx, ty) = (tile % tiles_x, tile / tiles_x);
            let x0 = tx * TILE;
            let y0 = ty * TILE;
            let bin = &bins[tile];
            let mut block = Vec::with_capacity(TILE * TILE);
            for iy in y0..(y0 + TILE).min(height) {
                for ix in x0..(x0 + TILE).min(width) {
                    block.push(composite_pixel(
                        bin.iter().map(|&i| &prepared[i as usize]),
                        ix as f64 + 0.5,
                        iy as f64 + 0.5,
                        background,
                    ));
                }
            }
            block
        })
        .collect();

    let mut color = ImageRgb::new(width, height);
    let mut alpha = ImageGray::new(width, height);
    for (tile, block) in blocks.into_iter().enumerate() {
        let (tx, ty) = (tile % tiles_x, tile / tiles_x);
        let x0 = tx * TILE;
        let y0 = ty * TILE;
        let cols = (x0 + TILE).min(width) - x0;
        for (k, (c, a)) in block.into_iter().enumerate() {
            let (ix, iy) = (x0 + k % cols, y0 + k / cols);
            color.set(ix, iy, c);
            alpha.set(ix, iy, a);
        }
    }
    Ok((color, alpha))
}

/// Reference rasterizer: every pixel scans every splat in order. Used as
/// the correctness oracle for the tiled path and as the speed baseline.
pub fn rasterize_naive(
    splats: &[Splat],
    width: usize,
    height: usize,
    background: Rgb,
) -> Result<(ImageRgb, ImageGray)> {
    check_size(width, height)?;
    let prepared = prepare(splats, width, height);
    let rows: Vec<Vec<(Rgb, f64)>> = (0..height)
        .into_par_iter()
        .map(|iy| {
            (0..width)
                .map(|ix| {
                    composite_pixel(
                        prepared.iter(),
                        ix as f64 + 0.5,
                        iy as f64 + 0.5,
                        background,
                    )
                })
                .collect()
        })
        .collect();
    let mut color = ImageRgb::new(width, height);
    let mut alpha = ImageGray::new(width, height);
    for (iy, row) in rows.into_iter().enumerate() {
        for (ix, (c, a)) in row.into_iter().enumerate() {
            color.set(ix, iy, c);
            alpha.set(ix, iy, a);
        }
    }
    Ok((color, alpha))
}

/// Wall-clock cost of each pipeline stage, in seconds.
#[derive(Clone, Copy, Debug, Default)]
pub struct RenderTimings {
    pub shade: f64,
    pub project: f64,
    pub sort: f64,
    pub rasterize: f64,
}

/// Projects, sorts and composites a cloud whose per-Gaussian colors were
/// shaded upstream. Returns the color image, alpha image, and stage
/// timings.
pub fn render_with_colors(
    cloud: &GaussianCloud,
    colors: &[Rgb],
    cam: &Camera,
    background: Rgb,
) -> Result<(ImageRgb, ImageGray, RenderTimings)> {
    if colors.len() != cloud.gaussians.len() {
        return Err(Error::InvalidArgument(format!(
            "{} colors for {} gaussians",
            colors.len(),
            cloud.gaussians.len()
        )));
    }
    cam.validate()?;
    let mut timings = RenderTimings::default();

    let t0 = std::time::Instant::now();
    let mut splats: Vec<Splat> = cloud
        .gaussians
        .iter()
        .zip(colors)
        .enumerate()
        .filter_map(|(i, (g, c))| {
            project_gaussian(g, *c, cam).map(|mut s| {
                s.index = i;
                s
            })
        })
        .collect();
    timings.project = t0.elapsed().as_secs_f64();

    let t1 = std::time::Instant::now();
    splats = sort_splats(splats)?;
    timings.sort = t1.elapsed().as_secs_f64();

    let t2 = std::time::Instant::now();
    let (color, alpha) = rasterize(&splats, cam.width, cam.height, background)?;
    timings.rasterize = t2.elapsed().as_secs_f64();

    Ok((color, alpha, timings))
}
