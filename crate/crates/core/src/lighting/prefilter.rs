//! Specular prefiltering: the environment map convolved with spherical
//! Gaussians of six widths, and interpolated lookups with gradients.

use std::f64::consts::PI;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rayon::prelude::*;

use super::{bilinear, texel_dir, EnvMap};
use crate::image::ImageRgb;
use crate::sphmath::{gauss_legendre, sg_grads_cos, sg_sphere_integral_grad, Dir};
use crate::{Error, Result, Rgb, Vec3};

/// Number of prefiltered mip levels.
pub const PREFILTER_LEVELS: usize = 6;
/// Narrowest prefiltered lobe width (radians).
pub const PREFILTER_SIGMA_MIN: f64 = 0.02;
/// Widest prefiltered lobe width (radians).
pub const PREFILTER_SIGMA_MAX: f64 = 1.0;
/// Smallest level resolution (rows; columns are always 2× rows). Coarser
/// levels would add percent-scale bilinear interpolation error for
/// mid-width lobes, which the ≤ 2% lookup budget cannot afford.
const MIN_LEVEL_ROWS: usize = 32;

/// Lobe width of level `l`: log-spaced over [0.02, 1.0].
pub fn level_sigma(l: usize) -> f64 {
    PREFILTER_SIGMA_MIN
        * (PREFILTER_SIGMA_MAX / PREFILTER_SIGMA_MIN).powf(l as f64 / (PREFILTER_LEVELS - 1) as f64)
}

/// An environment map convolved with spherical-Gaussian kernels of six
/// widths. Level `l` stores the raw convolution
/// `E_l(q) = ∫ L(ω)·G(ω; q, σ_l) dω` and its width derivative
/// `∂E/∂σ|_{σ_l}` at a resolution halved per level (floored at 32 × 64),
/// alongside the exact lobe mass `I(σ_l)` and its derivative.
///
/// The slope planes let lookups interpolate across widths with cubic
/// Hermite segments whose node derivatives are exact, which keeps the
/// between-level error well under the bilinear error of the planes
/// themselves (and makes the lookup C¹ in σ).
#[derive(Clone, Debug, PartialEq)]
pub struct PrefilteredEnv {
    pub levels: Vec<ImageRgb>,
    pub slopes: Vec<ImageRgb>,
    pub sigmas: Vec<f64>,
    pub lobe_mass: Vec<f64>,
    pub lobe_mass_grad: Vec<f64>,
}

/// Value and first derivatives of a prefiltered lookup.
#[derive(Clone, Copy, Debug)]
pub struct EnvLookup {
    pub value: Rgb,
    /// ∂value/∂σ.
    pub d_sigma: Rgb,
    /// ∂value/∂q per Cartesian axis, tangential to the sphere at `q`.
    pub d_q: [Rgb; 3],
}

/// Orthonormal tangent frame at `q`.
fn tangent_frame(q: Vec3) -> (Vec3, Vec3) {
    let helper = if q.x.abs() < 0.9 { Vec3::x() } else { Vec3::y() };
    let e1 = q.cross(&helper).normalize();
    let e2 = q.cross(&e1);
    (e1, e2)
}

/// Lobe-adapted convolution `∫ L(ω)·G(ω; q, σ) dω` and its σ-derivative,
/// over the bilinear extension of the map: Gauss–Legendre rings around `q`
/// out to `6σ` (tail < 2e⁻¹⁸), uniform in azimuth.
///
/// Polar-angle ladders of the equirectangular grid truncate at the poles
/// and alias narrow kernels; rings centered on the query have neither
/// problem, so constant maps reproduce `c·I(σ)` for every `q`.
fn convolve_rings(
    env: &EnvMap,
    q: Dir,
    sigma: f64,
    nodes: &[f64],
    weights: &[f64],
    phi_table: &[(f64, f64)],
) -> (Rgb, Rgb) {
    let r_max = (6.0 * sigma).min(PI);
    let (e1, e2) = tangent_frame(q.as_vec());
    let mut acc = Rgb::zeros();
    let mut acc_slope = Rgb::zeros();
    for (x, w) in nodes.iter().zip(weights) {
        let r = 0.5 * r_max * (x + 1.0);
        let (sin_r, cos_r) = r.sin_cos();
        let (kernel, _, dkernel) = sg_grads_cos(cos_r, sigma);
        let mut ring = Rgb::zeros();
        for &(cos_p, sin_p) in phi_table {
            let d = q.as_vec() * cos_r + (e1 * cos_p + e2 * sin_p) * sin_r;
            ring += bilinear(&env.image, Dir::from_unit(d));
        }
        let geom = 0.5 * r_max * w * sin_r;
        acc += ring * (geom * kernel);
        acc_slope += ring * (geom * dkernel);
    }
    let scale = 2.0 * PI / phi_table.len() as f64;
    (acc * scale, acc_slope * scale)
}

fn phi_table(n: usize) -> Vec<(f64, f64)> {
    (0..n)
        .map(|k| {
            let phi = 2.0 * PI * (k as f64 + 0.5) / n as f64;
            (phi.cos(), phi.sin())
        })
        .collect()
}

/// Reference-grade convolution (96 radial × 256 azimuthal nodes) for
/// oracle comparisons. Same integrand as the prefilter tables, far denser
/// rule.
pub fn sg_convolve_dense(env: &EnvMap, q: Dir, sigma: f64) -> Rgb {
    let (nodes, weights) = gauss_legendre(96);
    convolve_rings(env, q, sigma, &nodes, &weights, &phi_table(256)).0
}

/// Convolves the map with all six kernels.
pub fn prefilter_env(env: &EnvMap) -> Result<PrefilteredEnv> {
    let src_h = env.height();
    if src_h < 16 {
        return Err(Error::InvalidArgument(format!(
            "environment map must have at least 16 rows to prefilter, got {src_h}"
        )));
    }
    let (nodes, weights) = gauss_legendre(24);
    let phis = phi_table(64);
    let mut levels = Vec::with_capacity(PREFILTER_LEVELS);
    let mut slopes = Vec::with_capacity(PREFILTER_LEVELS);
    let mut sigmas = Vec::with_capacity(PREFILTER_LEVELS);
    let mut lobe_mass = Vec::with_capacity(PREFILTER_LEVELS);
    let mut lobe_mass_grad = Vec::with_capacity(PREFILTER_LEVELS);
    for l in 0..PREFILTER_LEVELS {
        let sigma = level_sigma(l);
        let out_h = (src_h >> l).max(MIN_LEVEL_ROWS);
        let out_w = 2 * out_h;
        let rows: Vec<Vec<(Rgb, Rgb)>> = (0..out_h)
            .into_par_iter()
            .map(|oy| {
                (0..out_w)
                    .map(|ox| {
                        let q = texel_dir(ox, oy, out_w, out_h);
                        convolve_rings(env, q, sigma, &nodes, &weights, &phis)
                    })
                    .collect()
            })
            .collect();
        let mut image = ImageRgb::new(out_w, out_h);
        let mut slope = ImageRgb::new(out_w, out_h);
        for (oy, row) in rows.into_iter().enumerate() {
            for (ox, (v, s)) in row.into_iter().enumerate() {
                image.set(ox, oy, v);
                slope.set(ox, oy, s);
            }
        }
        levels.push(image);
        slopes.push(slope);
        sigmas.push(sigma);
        let (mass, dmass) = sg_sphere_integral_grad(sigma);
        lobe_mass.push(mass);
        lobe_mass_grad.push(dmass);
    }
    Ok(PrefilteredEnv { levels, slopes, sigmas, lobe_mass, lobe_mass_grad })
}

/// Bilinear sample plus partials w.r.t. colatitude and azimuth:
/// `(value, ∂/∂θ, ∂/∂φ)`, already scaled by this level's resolution.
fn bilinear_sph(image: &ImageRgb, theta: f64, phi: f64) -> (Rgb, Rgb, Rgb) {
    let (w, h) = (image.width(), image.height());
    let u = phi / (2.0 * PI) * w as f64 - 0.5;
    let v = theta / PI * h as f64 - 0.5;
    let (iu, iv) = (u.floor(), v.floor());
    let (fu, fv) = (u - iu, v - iv);
    let wrap = |i: i64| -> usize { i.rem_euclid(w as i64) as usize };
    let clamp_row = |i: i64| -> usize { i.clamp(0, h as i64 - 1) as usize };
    let (u0, u1) = (wrap(iu as i64), wrap(iu as i64 + 1));
    let (v0, v1) = (clamp_row(iv as i64), clamp_row(iv as i64 + 1));
    let (p00, p10) = (image.get(u0, v0), image.get(u1, v0));
    let (p01, p11) = (image.get(u0, v1), image.get(u1, v1));
    let value = p00 * ((1.0 - fu) * (1.0 - fv))
        + p10 * (fu * (1.0 - fv))
        + p01 * ((1.0 - fu) * fv)
        + p11 * (fu * fv);
    let d_u = (p10 - p00) * (1.0 - fv) + (p11 - p01) * fv;
    let d_v = (p01 - p00) * (1.0 - fu) + (p11 - p10) * fu;
    (value, d_v * (h as f64 / PI), d_u * (w as f64 / (2.0 * PI)))
}

/// One level's normalized-shape sample at a query point: the shape
/// `N = E/I(σ_l)`, its true width slope `S = ∂N/∂σ|_{σ_l}`, and the
/// spatial partials of both.
struct NodeSample {
    n: Rgb,
    n_th: Rgb,
    n_ph: Rgb,
    s: Rgb,
    s_th: Rgb,
    s_ph: Rgb,
}

impl PrefilteredEnv {
    fn node(&self, level: usize, theta: f64, phi: f64) -> NodeSample {
        let (e, e_th, e_ph) = bilinear_sph(&self.levels[level], theta, phi);
        let (de, de_th, de_ph) = bilinear_sph(&self.slopes[level], theta, phi);
        let m = self.lobe_mass[level];
        let ratio = self.lobe_mass_grad[level] / m;
        // N = E/I ⇒ ∂N/∂σ = (∂E/∂σ − E·I'/I)/I.
        NodeSample {
            n: e / m,
            n_th: e_th / m,
            n_ph: e_ph / m,
            s: (de - e * ratio) / m,
            s_th: (de_th - e_th * ratio) / m,
            s_ph: (de_ph - e_ph * ratio) / m,
        }
    }

    /// Filtered radiance `∫ L(ω)·G(ω; q, σ) dω`.
    ///
    /// The *shape* `E_l/I(σ_l)` is interpolated across the two bracketing
    /// levels with a cubic Hermite segment in ln σ whose node values and
    /// slopes come straight from the stored planes — per channel on the
    /// logarithm of the shape when the samples are safely positive (shapes
    /// vary near-exponentially with ln σ in dim regions, which log space
    /// tracks closely), on the raw shape otherwise — then rescaled by the
    /// exact lobe mass `I(σ)`. Outside `[0.02, 1.0]` the nearest level's
    /// shape is reused, so the magnitude stays exact even where the shape
    /// saturates.
    pub fn lookup(&self, q: Dir, sigma: f64) -> Rgb {
        self.lookup_grad(q, sigma).value
    }

    /// Lookup with analytic derivatives (exact within a bilinear cell and
    /// a Hermite segment).
    pub fn lookup_grad(&self, q: Dir, sigma: f64) -> EnvLookup {
        let theta = q.z.clamp(-1.0, 1.0).acos();
        let phi = q.y.atan2(q.x).rem_euclid(2.0 * PI);
        let (mass, dmass) = sg_sphere_integral_grad(sigma);

        let last = self.sigmas.len() - 1;
        let step = (self.sigmas[last] / self.sigmas[0]).ln() / last as f64;
        let x = (sigma.max(1e-12) / self.sigmas[0]).ln() / step;

        // Clamped shape outside the covered width range.
        if x <= 0.0 || x >= last as f64 {
            let level = if x <= 0.0 { 0 } else { last };
            let s = self.node(level, theta, phi);
            return assemble(s.n, s.n_th, s.n_ph, Rgb::zeros(), theta, phi, mass, dmass);
        }

        let lo = (x.floor() as usize).min(last - 1);
        let xi = x - lo as f64;
        let nodes = [self.node(lo, theta, phi), self.node(lo + 1, theta, phi)];
        // Node slopes converted to d/dx units: dσ/dx = σ_node · step.
        let chain = [self.sigmas[lo] * step, self.sigmas[lo + 1] * step];

        let h = [
            (2.0 * xi - 3.0) * xi * xi + 1.0,
            ((xi - 2.0) * xi + 1.0) * xi,
            (3.0 - 2.0 * xi) * xi * xi,
            (xi - 1.0) * xi * xi,
        ];
        let dh = [
            6.0 * xi * (xi - 1.0),
            (3.0 * xi - 4.0) * xi + 1.0,
            6.0 * xi * (1.0 - xi),
            (3.0 * xi - 2.0) * xi,
        ];

        let max_n = nodes.iter().map(|s| s.n.abs().max()).fold(0.0, f64::max);
        let safe_log = nodes.iter().all(|s| s.n.min() > 1e-12 * max_n.max(1e-300));

        let (mut n, mut n_th, mut n_ph, mut dn_dx) =
            (Rgb::zeros(), Rgb::zeros(), Rgb::zeros(), Rgb::zeros());
        for ch in 0..3 {
            let (a, b) = (nodes[0].n[ch], nodes[1].n[ch]);
            if safe_log {
                // Hermite on ln N: node slope d(ln N)/dx = (S/N)·σ·step.
                let (ma, mb) = (nodes[0].s[ch] / a * chain[0], nodes[1].s[ch] / b * chain[1]);
                let curve = h[0] * a.ln() + h[1] * ma + h[2] * b.ln() + h[3] * mb;
                let d_curve = dh[0] * a.ln() + dh[1] * ma + dh[2] * b.ln() + dh[3] * mb;
                let value = curve.exp();
                n[ch] = value;
                dn_dx[ch] = value * d_curve;
                // Spatial partials of the interpolant: the node values'
                // and node slopes' own spatial variation, both chained
                // through the exponential.
                for (axis_n, axis_s, out) in [
                    (
                        [nodes[0].n_th[ch], nodes[1].n_th[ch]],
                        [nodes[0].s_th[ch], nodes[1].s_th[ch]],
                        &mut n_th[ch],
                    ),
                    (
                        [nodes[0].n_ph[ch], nodes[1].n_ph[ch]],
                        [nodes[0].s_ph[ch], nodes[1].s_ph[ch]],
                        &mut n_ph[ch],
                    ),
                ] {
                    // ∂m/∂· = chain·(S'·N − S·N')/N².
                    let dma = chain[0] * (axis_s[0] * a - nodes[0].s[ch] * axis_n[0]) / (a * a);
                    let dmb = chain[1] * (axis_s[1] * b - nodes[1].s[ch] * axis_n[1]) / (b * b);
                    *out = value
                        * (h[0] * axis_n[0] / a + h[1] * dma + h[2] * axis_n[1] / b + h[3] * dmb);
                }
            } else {
                // Raw-shape Hermite for regions touching zero radiance.
                let (ma, mb) = (nodes[0].s[ch] * chain[0], nodes[1].s[ch] * chain[1]);
                n[ch] = h[0] * a + h[1] * ma + h[2] * b + h[3] * mb;
                dn_dx[ch] = dh[0] * a + dh[1] * ma + dh[2] * b + dh[3] * mb;
                n_th[ch] = h[0] * nodes[0].n_th[ch]
                    + h[1] * nodes[0].s_th[ch] * chain[0]
                    + h[2] * nodes[1].n_th[ch]
                    + h[3] * nodes[1].s_th[ch] * chain[1];
                n_ph[ch] = h[0] * nodes[0].n_ph[ch]
                    + h[1] * nodes[0].s_ph[ch] * chain[0]
                    + h[2] * nodes[1].n_ph[ch]
                    + h[3] * nodes[1].s_ph[ch] * chain[1];
            }
        }
        assemble(n, n_th, n_ph, dn_dx / (step * sigma), theta, phi, mass, dmass)
    }

    pub fn save(&self, path: &Path, source_hash: &[u8; 32]) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(b"RGPF")?;
        w.write_u32::<LittleEndian>(1)?;
        w.write_all(source_hash)?;
        w.write_u8(self.levels.len() as u8)?;
        for (l, img) in self.levels.iter().enumerate() {
            w.write_u64::<LittleEndian>(img.width() as u64)?;
            w.write_u64::<LittleEndian>(img.height() as u64)?;
            w.write_f64::<LittleEndian>(self.sigmas[l])?;
            w.write_f64::<LittleEndian>(self.lobe_mass[l])?;
            for p in img.pixels().iter().chain(self.slopes[l].pixels()) {
                w.write_f64::<LittleEndian>(p.x)?;
                w.write_f64::<LittleEndian>(p.y)?;
                w.write_f64::<LittleEndian>(p.z)?;
            }
        }
        w.flush()?;
        Ok(())
    }

    /// Loads a cache file, returning the table and the stored source hash.
    pub fn load(path: &Path) -> Result<(PrefilteredEnv, [u8; 32])> {
        let loc = path.display().to_string();
        let mut r = BufReader::new(File::open(path)?);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)
            .map_err(|_| Error::format(&loc, "truncated before magic"))?;
        if &magic != b"RGPF" {
            return Err(Error::format(&loc, "bad magic: not a prefilter cache"));
        }
        let version = r
            .read_u32::<LittleEndian>()
            .map_err(|_| Error::format(&loc, "truncated version"))?;
        if version != 1 {
            return Err(Error::format(&loc, format!("unsupported version {version}")));
        }
        let mut hash = [0u8; 32];
        r.read_exact(&mut hash).map_err(|_| Error::format(&loc, "truncated hash"))?;
        let n = r.read_u8().map_err(|_| Error::format(&loc, "truncated level count"))? as usize;
        if n != PREFILTER_LEVELS {
            return Err(Error::format(&loc, format!("expected {PREFILTER_LEVELS} levels, got {n}")));
        }
        let mut levels = Vec::with_capacity(n);
        let mut slopes = Vec::with_capacity(n);
        let mut sigmas = Vec::with_capacity(n);
        let mut lobe_mass = Vec::with_capacity(n);
        let mut lobe_mass_grad = Vec::with_capacity(n);
        for l in 0..n {
            let trunc = |what: &str| Error::format(&loc, format!("truncated {what} in level {l}"));
            let w = r.read_u64::<LittleEndian>().map_err(|_| trunc("width"))? as usize;
            let h = r.read_u64::<LittleEndian>().map_err(|_| trunc("height"))? as usize;
            if w != 2 * h || h == 0 || h > 1 << 20 {
                return Err(Error::format(&loc, format!("level {l} has bad shape {w}×{h}")));
            }
            let sigma = r.read_f64::<LittleEndian>().map_err(|_| trunc("sigma"))?;
            if !sigma.is_finite() || sigma <= 0.0 {
                return Err(Error::format(&loc, format!("level {l} has bad sigma {sigma}")));
            }
            sigmas.push(sigma);
            lobe_mass.push(r.read_f64::<LittleEndian>().map_err(|_| trunc("lobe mass"))?);
            lobe_mass_grad.push(sg_sphere_integral_grad(sigma).1);
            let mut img = ImageRgb::new(w, h);
            let mut slope = ImageRgb::new(w, h);
            for i in 0..2 * w * h {
                let x = r.read_f64::<LittleEndian>().map_err(|_| trunc("pixels"))?;
                let y = r.read_f64::<LittleEndian>().map_err(|_| trunc("pixels"))?;
                let z = r.read_f64::<LittleEndian>().map_err(|_| trunc("pixels"))?;
                if !(x.is_finite() && y.is_finite() && z.is_finite()) {
                    return Err(Error::format(
                        &loc,
                        format!("non-finite pixel {i} in level {l}"),
                    ));
                }
                let target = if i < w * h { &mut img } else { &mut slope };
                let j = i % (w * h);
                target.set(j % w, j / w, Rgb::new(x, y, z));
            }
            levels.push(img);
            slopes.push(slope);
        }
        let mut rest = Vec::new();
        r.read_to_end(&mut rest)?;
        if !rest.is_empty() {
            return Err(Error::format(&loc, format!("{} trailing bytes", rest.len())));
        }
        Ok((PrefilteredEnv { levels, slopes, sigmas, lobe_mass, lobe_mass_grad }, hash))
    }
}

#[allow(clippy::too_many_arguments)]
fn assemble(
    shape: Rgb,
    shape_dth: Rgb,
    shape_dph: Rgb,
    dshape_dsigma: Rgb,
    theta: f64,
    phi: f64,
    mass: f64,
    dmass: f64,
) -> EnvLookup {
    let value = shape * mass;
    let d_sigma = dshape_dsigma * mass + shape * dmass;
    // Chain the spherical partials onto Cartesian q: for unit q,
    // ∇θ = e_θ and ∇φ = e_φ / sinθ.
    let sin_theta = theta.sin().max(1e-9);
    let e_theta = Vec3::new(theta.cos() * phi.cos(), theta.cos() * phi.sin(), -sin_theta);
    let e_phi = Vec3::new(-phi.sin(), phi.cos(), 0.0);
    let mut d_q = [Rgb::zeros(); 3];
    for axis in 0..3 {
        d_q[axis] =
            (shape_dph * mass) * (e_phi[axis] / sin_theta) + (shape_dth * mass) * e_theta[axis];
    }
    EnvLookup { value, d_sigma, d_q }
}
