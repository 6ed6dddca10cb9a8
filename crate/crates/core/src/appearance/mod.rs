//! Radiance-transfer shading of Gaussian clouds.
//!
//! Each Gaussian's outgoing color is the sum of
//!
//! * a **diffuse** term — an SH dot product between the incident light and
//!   the learned transfer coefficients (RGB for bands 0–3, monochrome for
//!   bands 4–8), scaled by albedo — and
//! * a **specular** term — a spherical-Gaussian lobe around the mirror
//!   direction, gated by a learned view-dependent visibility factor that
//!   absorbs Fresnel, geometric attenuation and occlusion (see
//!   [`validate`] for the error analysis of that factorization).
//!
//! Both terms use the viewing direction `ω_o`, the unit vector **from the
//! Gaussian center toward the camera center**, evaluated once per Gaussian
//! (not per pixel). With that convention, `reflect(ω_o, n)` is the mirror
//! lobe axis and `ω_o = n` means head-on viewing.

pub mod validate;

use crate::image::{ImageGray, ImageRgb};
use crate::lighting::{LightPattern, PrefilteredEnv};
use crate::scene::{GaussianCloud, TransferParams, D_C_LEN, VIEW_SH_LEN};
use crate::sphmath::{reflect, sg_eval_cos, sh_basis_into, Dir, ShVec};
use crate::splatter::{
    project_gaussian, rasterize, sort_splats, Camera, RenderTimings, Splat,
};
use crate::{sigmoid, Error, Result, Rgb, Vec3};
use rayon::prelude::*;
use std::time::Instant;

/// SH order the shading model consumes for incident light (81 coefficients).
pub const LIGHT_ORDER: usize = 8;

/// Rec. 709 luma weights used to contract colored light against the
/// monochrome transfer bands.
pub const LUMA: [f64; 3] = [0.2126, 0.7152, 0.0722];

/// Luma (Rec. 709) of a linear RGB triple.
pub fn luma(c: Rgb) -> f64 {
    LUMA[0] * c.x + LUMA[1] * c.y + LUMA[2] * c.z
}

/// Which light source drives the specular lobes. The diffuse term always
/// reads the SH projection of the same light; keeping exactly one specular
/// representation per context is enforced by construction.
#[derive(Clone, Copy, Debug)]
pub enum SpecularSource<'a> {
    /// Discrete point lights (delta lobes evaluated analytically).
    Points(&'a LightPattern),
    /// A prefiltered environment map (single lookup per Gaussian).
    Env(&'a PrefilteredEnv),
}

/// Everything shading needs besides the cloud itself: the light in SH form,
/// the specular light source, and the camera position that defines `ω_o`.
#[derive(Clone, Copy, Debug)]
pub struct ShadeContext<'a> {
    /// Order-8 SH coefficients of the incident light (RGB or monochrome).
    pub light_sh: &'a ShVec,
    pub specular: SpecularSource<'a>,
    /// World-space camera center; `ω_o = normalize(cam_center − pos)`.
    pub cam_center: Vec3,
}

impl<'a> ShadeContext<'a> {
    pub fn points(
        light_sh: &'a ShVec,
        pattern: &'a LightPattern,
        cam_center: Vec3,
    ) -> Result<ShadeContext<'a>> {
        let ctx = ShadeContext { light_sh, specular: SpecularSource::Points(pattern), cam_center };
        ctx.validate()?;
        Ok(ctx)
    }

    pub fn env(
        light_sh: &'a ShVec,
        env: &'a PrefilteredEnv,
        cam_center: Vec3,
    ) -> Result<ShadeContext<'a>> {
        let ctx = ShadeContext { light_sh, specular: SpecularSource::Env(env), cam_center };
        ctx.validate()?;
        Ok(ctx)
    }

    pub fn validate(&self) -> Result<()> {
        if self.light_sh.order() != LIGHT_ORDER {
            return Err(Error::InvalidArgument(format!(
                "shading needs an order-{LIGHT_ORDER} light, got order {}",
                self.light_sh.order()
            )));
        }
        if !self.cam_center.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("camera center".into()));
        }
        Ok(())
    }
}

/// Order-2 view basis evaluated at `ω_o` (9 values).
fn view_basis(w_o: Dir) -> [f64; VIEW_SH_LEN] {
    let mut b = [0.0; VIEW_SH_LEN];
    sh_basis_into(w_o, 2, &mut b);
    b
}

/// Diffuse transfer response before albedo: RGB transfer against light
/// bands 0–3 plus monochrome transfer against the luma of bands 4–8.
///
/// Panics if the light carries fewer than order-8 coefficients.
pub fn transfer_response(tp: &TransferParams, light: &ShVec) -> Rgb {
    assert!(
        light.order() >= LIGHT_ORDER,
        "diffuse shading needs an order-{LIGHT_ORDER} light, got order {}",
        light.order()
    );
    let mut c = Rgb::zeros();
    for (i, d_c) in tp.d_c.iter().enumerate() {
        c += light.rgb(i).component_mul(d_c);
    }
    let mut mono = 0.0;
    for (k, d_m) in tp.d_m.iter().enumerate() {
        mono += luma(light.rgb(D_C_LEN + k)) * d_m;
    }
    c + Rgb::repeat(mono)
}

/// Diffuse color: static albedo times the transfer response. Eye groups
/// substitute their view-conditioned albedo upstream (see [`shade`]).
pub fn shade_diffuse(tp: &TransferParams, light: &ShVec) -> Rgb {
    tp.albedo.component_mul(&transfer_response(tp, light))
}

/// Albedo entering the diffuse term: the static one, unless the Gaussian
/// carries a view-conditioned albedo (eye groups), which replaces it
/// entirely.
pub fn effective_albedo(tp: &TransferParams, w_o: Dir) -> Rgb {
    match &tp.albedo_view {
        None => tp.albedo,
        Some(av) => {
            let b = view_basis(w_o);
            let mut a = Rgb::zeros();
            for (j, &bj) in b.iter().enumerate() {
                a += bj * av[j];
            }
            a
        }
    }
}

/// Shading normal: base normal plus the order-2 view-SH residual,
/// normalized. A residual that cancels the base (norm < 1e-6) falls back to
/// the base normal so the result is always a valid direction.
pub fn eval_normal(tp: &TransferParams, w_o: Dir) -> Dir {
    let b = view_basis(w_o);
    let mut n = tp.n_base;
    for (j, &bj) in b.iter().enumerate() {
        n += bj * tp.dn_view[j];
    }
    if n.norm() < 1e-6 {
        return Dir::new(tp.n_base).unwrap_or_else(|_| Dir::z());
    }
    Dir::from_unit(n.normalize())
}

/// View-dependent visibility gate in (0, 1): sigmoid of the order-2
/// view-SH evaluation.
pub fn eval_visibility(tp: &TransferParams, w_o: Dir) -> f64 {
    let b = view_basis(w_o);
    let mut logit_v = 0.0;
    for (j, &bj) in b.iter().enumerate() {
        logit_v += bj * tp.v_view[j];
    }
    sigmoid(logit_v)
}

/// Specular response to discrete point lights: each delta light contributes
/// its intensity times the lobe value at its direction,
/// `v(ω_o) · Σ intensity ⊙ G(ω_l; q, σ)` with `q = reflect(ω_o, n(ω_o))`.
pub fn shade_specular_point(tp: &TransferParams, pattern: &LightPattern, w_o: Dir) -> Rgb {
    let v = eval_visibility(tp, w_o);
    let q = reflect(w_o, eval_normal(tp, w_o));
    let sigma = tp.sigma();
    let mut c = Rgb::zeros();
    for light in &pattern.lights {
        c += light.intensity * sg_eval_cos(q.dot(&light.dir), sigma);
    }
    v * c
}

/// Specular response to an environment: one prefiltered lookup at the
/// mirror direction, `v(ω_o) · lookup(q, σ)`.
pub fn shade_specular_env(tp: &TransferParams, pf: &PrefilteredEnv, w_o: Dir) -> Rgb {
    let v = eval_visibility(tp, w_o);
    let q = reflect(w_o, eval_normal(tp, w_o));
    v * pf.lookup(q, tp.sigma())
}

/// Specular term for whichever source the context carries.
pub fn shade_specular(tp: &TransferParams, ctx: &ShadeContext, w_o: Dir) -> Rgb {
    match ctx.specular {
        SpecularSource::Points(p) => shade_specular_point(tp, p, w_o),
        SpecularSource::Env(pf) => shade_specular_env(tp, pf, w_o),
    }
}

fn check_transfer_len(cloud: &GaussianCloud) -> Result<()> {
    if cloud.transfer.len() != cloud.gaussians.len() {
        return Err(Error::InvalidArgument(format!(
            "{} transfer blocks for {} gaussians",
            cloud.transfer.len(),
            cloud.gaussians.len()
        )));
    }
    Ok(())
}

/// Per-Gaussian viewing directions. Errors when a Gaussian sits on the
/// camera center, where `ω_o` is undefined.
pub fn view_dirs(cloud: &GaussianCloud, cam_center: Vec3) -> Result<Vec<Dir>> {
    cloud
        .gaussians
        .iter()
        .enumerate()
        .map(|(i, g)| {
            Dir::new(cam_center - g.pos).map_err(|_| {
                Error::InvalidArgument(format!(
                    "gaussian {i} coincides with the camera center; viewing direction undefined"
                ))
            })
        })
        .collect()
}

/// Diffuse and specular colors of one Gaussian (the two addends of
/// [`shade`]).
pub fn shade_parts(tp: &TransferParams, ctx: &ShadeContext, w_o: Dir) -> (Rgb, Rgb) {
    let albedo = effective_albedo(tp, w_o);
    let diffuse = albedo.component_mul(&transfer_response(tp, ctx.light_sh));
    let specular = shade_specular(tp, ctx, w_o);
    (diffuse, specular)
}

/// Shades every Gaussian: diffuse plus specular, with the eye groups'
/// view-conditioned albedo substituted into the diffuse term.
pub fn shade(cloud: &GaussianCloud, ctx: &ShadeContext) -> Result<Vec<Rgb>> {
    ctx.validate()?;
    check_transfer_len(cloud)?;
    let dirs = view_dirs(cloud, ctx.cam_center)?;
    Ok((0..cloud.gaussians.len())
        .into_par_iter()
        .map(|i| {
            let (diffuse, specular) = shade_parts(&cloud.transfer[i], ctx, dirs[i]);
            diffuse + specular
        })
        .collect())
}

/// Shades the cloud for the camera implied by the context and rasterizes
/// it. Returns color, alpha and per-stage timings.
pub fn render(
    cloud: &GaussianCloud,
    ctx: &ShadeContext,
    cam: &Camera,
    background: Rgb,
) -> Result<(ImageRgb, ImageGray, RenderTimings)> {
    let t0 = Instant::now();
    let colors = shade(cloud, ctx)?;
    let shade_time = t0.elapsed().as_secs_f64();
    let (color, alpha, mut timings) =
        crate::splatter::render_with_colors(cloud, &colors, cam, background)?;
    timings.shade = shade_time;
    Ok((color, alpha, timings))
}

/// Intrinsic image set produced by [`decompose`]. All components share one
/// projection and compositing order and are rendered over black, so
/// `full = diffuse + specular` holds per pixel and intrinsics read as
/// coverage-weighted averages (divide by `alpha` to undo the weighting).
pub struct Decomposition {
    pub full: ImageRgb,
    pub diffuse: ImageRgb,
    pub specular: ImageRgb,
    /// Effective albedo (view-conditioned for eye groups).
    pub albedo: ImageRgb,
    /// Transfer response before albedo.
    pub diffuse_shading: ImageRgb,
    /// Shading normal encoded as `(n + 1)/2` per channel.
    pub normal: ImageRgb,
    pub alpha: ImageGray,
}

struct GaussianParts {
    full: Rgb,
    diffuse: Rgb,
    specular: Rgb,
    albedo: Rgb,
    shading: Rgb,
    normal: Rgb,
}

/// Renders the intrinsic components of a scene with identical geometry.
pub fn decompose(cloud: &GaussianCloud, ctx: &ShadeContext, cam: &Camera) -> Result<Decomposition> {
    ctx.validate()?;
    check_transfer_len(cloud)?;
    cam.validate()?;
    let dirs = view_dirs(cloud, ctx.cam_center)?;
    let parts: Vec<GaussianParts> = (0..cloud.gaussians.len())
        .into_par_iter()
        .map(|i| {
            let tp = &cloud.transfer[i];
            let w_o = dirs[i];
            let albedo = effective_albedo(tp, w_o);
            let shading = transfer_response(tp, ctx.light_sh);
            let diffuse = albedo.component_mul(&shading);
            let specular = shade_specular(tp, ctx, w_o);
            let n = eval_normal(tp, w_o);
            GaussianParts {
                full: diffuse + specular,
                diffuse,
                specular,
                albedo,
                shading,
                normal: (n.as_vec() + Vec3::repeat(1.0)) * 0.5,
            }
        })
        .collect();

    // Project and sort once; every component reuses the same splat order.
    let mut splats = Vec::new();
    for (i, g) in cloud.gaussians.iter().enumerate() {
        if let Some(mut s) = project_gaussian(g, parts[i].full, cam) {
            s.index = i;
            splats.push(s);
        }
    }
    let splats = sort_splats(splats)?;

    let black = Rgb::zeros();
    let raster = |pick: &dyn Fn(&GaussianParts) -> Rgb| -> Result<ImageRgb> {
        let recolored: Vec<Splat> = splats
            .iter()
            .map(|s| {
                let mut t = s.clone();
                t.color = pick(&parts[s.index]);
                t
            })
            .collect();
        Ok(rasterize(&recolored, cam.width, cam.height, black)?.0)
    };

    let (full, alpha) = rasterize(&splats, cam.width, cam.height, black)?;
    Ok(Decomposition {
        full,
        diffuse: raster(&|p| p.diffuse)?,
        specular: raster(&|p| p.specular)?,
        albedo: raster(&|p| p.albedo)?,
        diffuse_shading: raster(&|p| p.shading)?,
        normal: raster(&|p| p.normal)?,
        alpha,
    })
}
