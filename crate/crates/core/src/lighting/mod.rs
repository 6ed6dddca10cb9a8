//! Incident light: distant point-light patterns, equirectangular
//! environment maps, their order-8 SH projections, and prefiltered
//! specular lookups.

mod prefilter;

pub use prefilter::{
    level_sigma, prefilter_env, sg_convolve_dense, EnvLookup, PrefilteredEnv, PREFILTER_LEVELS,
    PREFILTER_SIGMA_MAX, PREFILTER_SIGMA_MIN,
};

use std::f64::consts::PI;
use std::path::Path;

use rand::{seq::SliceRandom, Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::image::ImageRgb;
use crate::sphmath::{fibonacci_sphere, sg_eval, sh_basis, sh_basis_into, Dir, SgLobe, ShVec};
use crate::{Error, Result, Rgb, Vec3};

/// A distant light: direction the light arrives *from*, linear intensity.
#[derive(Clone, Debug, PartialEq)]
pub struct PointLight {
    pub dir: Dir,
    pub intensity: Rgb,
}

/// A set of simultaneously active distant lights.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LightPattern {
    pub lights: Vec<PointLight>,
}

#[derive(Serialize, Deserialize)]
struct LightJson {
    dir: [f64; 3],
    intensity: [f64; 3],
}

#[derive(Serialize, Deserialize)]
struct PatternJson {
    lights: Vec<LightJson>,
}

impl LightPattern {
    pub fn new(lights: Vec<PointLight>) -> LightPattern {
        LightPattern { lights }
    }

    /// SH coefficients of the pattern: each delta light contributes
    /// `intensity · y(dir)`.
    pub fn to_sh(&self, order: usize) -> ShVec {
        let mut sh = ShVec::zeros(order, 3);
        for light in &self.lights {
            let basis = sh_basis(light.dir, order);
            for (i, b) in basis.iter().enumerate() {
                let c = sh.rgb(i) + light.intensity * *b;
                sh.set_rgb(i, c);
            }
        }
        sh
    }

    /// Total intensity arriving from all lights (for exposure heuristics).
    pub fn total_intensity(&self) -> Rgb {
        self.lights.iter().map(|l| l.intensity).sum()
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        let doc = PatternJson {
            lights: self
                .lights
                .iter()
                .map(|l| LightJson {
                    dir: [l.dir.x, l.dir.y, l.dir.z],
                    intensity: [l.intensity.x, l.intensity.y, l.intensity.z],
                })
                .collect(),
        };
        let text = serde_json::to_string_pretty(&doc)?;
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn load_json(path: &Path) -> Result<LightPattern> {
        let text = std::fs::read_to_string(path)?;
        let doc: PatternJson = serde_json::from_str(&text)
            .map_err(|e| Error::format(path.display().to_string(), format!("light pattern: {e}")))?;
        let mut lights = Vec::with_capacity(doc.lights.len());
        for (i, l) in doc.lights.iter().enumerate() {
            let dir = Dir::from_xyz(l.dir[0], l.dir[1], l.dir[2]).map_err(|_| {
                Error::format(
                    path.display().to_string(),
                    format!("light {i} has a degenerate direction"),
                )
            })?;
            lights.push(PointLight {
                dir,
                intensity: Rgb::new(l.intensity[0], l.intensity[1], l.intensity[2]),
            });
        }
        Ok(LightPattern { lights })
    }
}

/// One-light-at-a-time rig: `n` white unit lights on a Fibonacci sphere,
/// one pattern per light.
pub fn olat_rig(n: usize) -> Vec<LightPattern> {
    fibonacci_sphere(n)
        .into_iter()
        .map(|dir| LightPattern::new(vec![PointLight { dir, intensity: Rgb::repeat(1.0) }]))
        .collect()
}

/// Random grouped patterns: each pattern switches on `group_size` distinct
/// lights of an `n_lights` OLAT rig.
pub fn grouped_rig(
    n_lights: usize,
    group_size: usize,
    n_patterns: usize,
    seed: u64,
) -> Vec<LightPattern> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dirs = fibonacci_sphere(n_lights);
    let indices: Vec<usize> = (0..n_lights).collect();
    (0..n_patterns)
        .map(|_| {
            let chosen = indices.choose_multiple(&mut rng, group_size.min(n_lights));
            LightPattern::new(
                chosen
                    .map(|&i| PointLight { dir: dirs[i], intensity: Rgb::repeat(1.0) })
                    .collect(),
            )
        })
        .collect()
}

/// Equirectangular environment map (latitude–longitude, width = 2·height).
///
/// Texel `(ix, iy)` covers colatitude `θ = π (iy + ½)/h` and azimuth
/// `φ = 2π (ix + ½)/w`; directions are `(sinθ cosφ, sinθ sinφ, cosθ)`.
#[derive(Clone, Debug, PartialEq)]
pub struct EnvMap {
    pub image: ImageRgb,
}

impl EnvMap {
    pub fn new(image: ImageRgb) -> Result<EnvMap> {
        if image.width() != 2 * image.height() || image.height() == 0 {
            return Err(Error::InvalidArgument(format!(
                "environment map must be 2h × h, got {} × {}",
                image.width(),
                image.height()
            )));
        }
        Ok(EnvMap { image })
    }

    /// Builds a map by evaluating `f` at every texel center.
    pub fn from_fn(height: usize, f: impl Fn(Dir) -> Rgb) -> Result<EnvMap> {
        let mut image = ImageRgb::new(2 * height, height);
        for iy in 0..height {
            for ix in 0..2 * height {
                let d = texel_dir(ix, iy, 2 * height, height);
                image.set(ix, iy, f(d));
            }
        }
        EnvMap::new(image)
    }

    pub fn width(&self) -> usize {
        self.image.width()
    }

    pub fn height(&self) -> usize {
        self.image.height()
    }

    pub fn texel_dir(&self, ix: usize, iy: usize) -> Dir {
        texel_dir(ix, iy, self.image.width(), self.image.height())
    }

    /// Per-texel solid angles; rows share a weight.
    /// The full set sums to exactly 4π and integrates every polynomial of
    /// degree ≤ min(16, h−1) in cosθ exactly (see [`row_weights`]).
    pub fn texel_solid_angles(&self) -> Vec<f64> {
        let rows = row_weights(self.image.height());
        let per_col = 2.0 * PI / self.image.width() as f64;
        rows.into_iter().map(|r| r * per_col).collect()
    }

    /// Bilinear lookup with azimuthal wrap-around and polar clamp.
    pub fn sample(&self, d: Dir) -> Rgb {
        bilinear(&self.image, d)
    }

    pub fn load_pfm(path: &Path) -> Result<EnvMap> {
        EnvMap::new(crate::image::read_pfm(path)?)
    }

    pub fn save_pfm(&self, path: &Path) -> Result<()> {
        crate::image::write_pfm(path, &self.image)
    }
}

pub(crate) fn texel_dir(ix: usize, iy: usize, w: usize, h: usize) -> Dir {
    let theta = PI * (iy as f64 + 0.5) / h as f64;
    let phi = 2.0 * PI * (ix as f64 + 0.5) / w as f64;
    Dir::from_unit(Vec3::new(
        theta.sin() * phi.cos(),
        theta.sin() * phi.sin(),
        theta.cos(),
    ))
}

pub(crate) fn bilinear(image: &ImageRgb, d: Dir) -> Rgb {
    let (w, h) = (image.width(), image.height());
    let theta = d.z.clamp(-1.0, 1.0).acos();
    let phi = d.y.atan2(d.x).rem_euclid(2.0 * PI);
    let u = phi / (2.0 * PI) * w as f64 - 0.5;
    let v = theta / PI * h as f64 - 0.5;
    let iu = u.floor();
    let iv = v.floor();
    let fu = u - iu;
    let fv = v - iv;
    let wrap = |i: i64| -> usize { i.rem_euclid(w as i64) as usize };
    let clamp_row = |i: i64| -> usize { i.clamp(0, h as i64 - 1) as usize };
    let (u0, u1) = (wrap(iu as i64), wrap(iu as i64 + 1));
    let (v0, v1) = (clamp_row(iv as i64), clamp_row(iv as i64 + 1));
    image.get(u0, v0) * ((1.0 - fu) * (1.0 - fv))
        + image.get(u1, v0) * (fu * (1.0 - fv))
        + image.get(u0, v1) * ((1.0 - fu) * fv)
        + image.get(u1, v1) * (fu * fv)
}

fn legendre_p(k: usize, z: f64) -> f64 {
    match k {
        0 => 1.0,
        1 => z,
        _ => {
            let (mut pm1, mut p) = (1.0, z);
            for n in 1..k {
                let next = ((2 * n + 1) as f64 * z * p - n as f64 * pm1) / (n + 1) as f64;
                pm1 = p;
                p = next;
            }
            p
        }
    }
}

/// Row quadrature weights for `∫₀^π f(θ) sinθ dθ` on midpoint rows
/// `θ_i = π(i+½)/h`.
///
/// The natural midpoint weights `sinθ_i · π/h` are nudged by the
/// least-norm correction that makes the rule exact for all Legendre
/// polynomials `P_k(cosθ)` up to `k = min(16, h−1)`. Products of two
/// order-8 spherical harmonics are degree-≤16 polynomials in cosθ after
/// azimuthal integration, so with ≥ 17 azimuth columns the SH Gram matrix
/// of the texel rule is the identity to machine precision — projecting a
/// band-limited map and re-rasterizing it is then a fixed point.
pub fn row_weights(h: usize) -> Vec<f64> {
    assert!(h > 0);
    let z: Vec<f64> = (0..h).map(|i| (PI * (i as f64 + 0.5) / h as f64).cos()).collect();
    let natural: Vec<f64> =
        (0..h).map(|i| (PI * (i as f64 + 0.5) / h as f64).sin() * PI / h as f64).collect();
    let k_max = 16.min(h - 1);
    let a = nalgebra::DMatrix::from_fn(k_max + 1, h, |k, i| legendre_p(k, z[i]));
    let b = nalgebra::DVector::from_fn(k_max + 1, |k, _| if k == 0 { 2.0 } else { 0.0 });
    let residual = b - &a * nalgebra::DVector::from_column_slice(&natural);
    let gram = &a * a.transpose();
    let mult = gram.lu().solve(&residual).expect("legendre gram is nonsingular");
    let delta = a.transpose() * mult;
    natural.into_iter().zip(delta.iter()).map(|(n, d)| n + d).collect()
}

/// Projects an environment map onto the order-`order` SH basis using the
/// moment-corrected texel rule.
pub fn env_to_sh(env: &EnvMap, order: usize) -> ShVec {
    let (w, h) = (env.width(), env.height());
    let rows = row_weights(h);
    let per_col = 2.0 * PI / w as f64;
    let n = crate::sphmath::num_coeffs(order);
    let mut sh = ShVec::zeros(order, 3);
    let mut basis = vec![0.0; n];
    for iy in 0..h {
        let w_texel = rows[iy] * per_col;
        for ix in 0..w {
            let d = env.texel_dir(ix, iy);
            sh_basis_into(d, order, &mut basis);
            let radiance = env.image.get(ix, iy) * w_texel;
            for (i, b) in basis.iter().enumerate() {
                let c = sh.rgb(i) + radiance * *b;
                sh.set_rgb(i, c);
            }
        }
    }
    sh
}

/// Rasterizes SH coefficients back into a band-limited environment map.
pub fn env_from_sh(sh: &ShVec, height: usize) -> Result<EnvMap> {
    EnvMap::from_fn(height, |d| sh.eval(d))
}

/// Smooth procedural HDR environment: `n_blobs` wide spherical-Gaussian
/// blobs (σ ≥ 0.35 so the map stays low-frequency) over an ambient floor
/// that keeps the dimmest regions at a workable fraction of the peak.
/// Deterministic in `seed`.
pub fn blob_env(height: usize, n_blobs: usize, seed: u64) -> Result<EnvMap> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut blobs = Vec::with_capacity(n_blobs);
    for _ in 0..n_blobs {
        let dir = Dir::from_xyz(
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
        )
        .unwrap_or_else(|_| Dir::from_unit(Vec3::z()));
        let sigma = rng.gen_range(0.35..0.8);
        let color = Rgb::new(
            rng.gen_range(0.3..2.5),
            rng.gen_range(0.3..2.5),
            rng.gen_range(0.3..2.5),
        );
        blobs.push((SgLobe::new(dir, sigma)?, color));
    }
    let ambient = Rgb::repeat(0.25);
    EnvMap::from_fn(height, move |d| {
        let mut out = ambient;
        for (lobe, color) in &blobs {
            out += *color * sg_eval(d, lobe);
        }
        out
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sphmath::{sh_index, SphereRule};

    #[test]
    fn row_weights_sum_to_two_and_kill_odd_moments() {
        for h in [16, 17, 64, 128] {
            let w = row_weights(h);
            let z: Vec<f64> =
                (0..h).map(|i| (PI * (i as f64 + 0.5) / h as f64).cos()).collect();
            for k in 0..=16.min(h - 1) {
                let got: f64 = w.iter().zip(&z).map(|(w, z)| w * z.powi(k as i32)).sum();
                let want = if k % 2 == 0 { 2.0 / (k as f64 + 1.0) } else { 0.0 };
                assert!((got - want).abs() < 1e-12, "h={h} k={k}: {got} vs {want}");
            }
            // Correction must stay a small perturbation of positive weights.
            assert!(w.iter().all(|&x| x > 0.0), "negative weight at h={h}");
        }
    }

    #[test]
    fn env_projection_is_a_fixed_point_on_bandlimited_maps() {
        // Random order-8 coefficients → rasterize → project: identical.
        let mut sh = ShVec::zeros(8, 3);
        let mut state = 1234567u64;
        for i in 0..81 {
            let mut next = || {
                state = state.wrapping_mul(6364136223846793005).wrapping_add(1);
                ((state >> 33) as f64 / (1u64 << 31) as f64) - 1.0
            };
            sh.set_rgb(i, Rgb::new(next(), next(), next()));
        }
        let env = env_from_sh(&sh, 64).unwrap();
        let back = env_to_sh(&env, 8);
        for i in 0..81 {
            let d = (back.rgb(i) - sh.rgb(i)).norm();
            assert!(d < 1e-10, "coefficient {i} drifted by {d}");
        }
    }

    #[test]
    fn env_projection_matches_dense_quadrature_on_smooth_map() {
        let env = blob_env(64, 3, 5).unwrap();
        let sh = env_to_sh(&env, 4);
        let rule = SphereRule::product(128, 256);
        for (l, m) in [(0usize, 0i64), (1, -1), (2, 0), (3, 2), (4, -3)] {
            let i = sh_index(l, m);
            let want = crate::sphmath::sphere_integrate_rgb(&rule, |d| {
                env.sample(d) * sh_basis(d, 4)[i]
            });
            // Bilinear sampling vs texel sums agree to the texel scale.
            assert!(
                (sh.rgb(i) - want).norm() < 2e-3,
                "l={l} m={m}: {:?} vs {want:?}",
                sh.rgb(i)
            );
        }
    }

    #[test]
    fn delta_pattern_sh_evaluates_to_basis_product() {
        let dir = Dir::from_xyz(0.3, -0.5, 0.81).unwrap();
        let pattern = LightPattern::new(vec![PointLight {
            dir,
            intensity: Rgb::new(2.0, 1.0, 0.5),
        }]);
        let sh = pattern.to_sh(8);
        let basis = sh_basis(dir, 8);
        for i in 0..81 {
            let want = Rgb::new(2.0, 1.0, 0.5) * basis[i];
            assert!((sh.rgb(i) - want).norm() < 1e-14);
        }
    }

    #[test]
    fn pattern_json_round_trip() {
        let rig = grouped_rig(16, 3, 2, 7);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pattern.json");
        rig[0].save_json(&path).unwrap();
        let loaded = LightPattern::load_json(&path).unwrap();
        assert_eq!(loaded.lights.len(), 3);
        for (a, b) in rig[0].lights.iter().zip(&loaded.lights) {
            assert!((a.dir.as_vec() - b.dir.as_vec()).norm() < 1e-15);
            assert!((a.intensity - b.intensity).norm() < 1e-15);
        }
    }

    #[test]
    fn olat_rig_has_one_unit_light_each() {
        let rig = olat_rig(8);
        assert_eq!(rig.len(), 8);
        for p in &rig {
            assert_eq!(p.lights.len(), 1);
            assert_eq!(p.lights[0].intensity, Rgb::repeat(1.0));
        }
    }

    #[test]
    fn bilinear_sampling_interpolates_and_wraps() {
        let env = EnvMap::from_fn(8, |d| Rgb::repeat(d.z)).unwrap();
        // At a texel center the sample must be the stored value.
        let d = env.texel_dir(3, 2);
        assert!((env.sample(d).x - env.image.get(3, 2).x).abs() < 1e-12);
        // Smooth everywhere, including across the φ = 0 seam.
        let a = env.sample(Dir::from_xyz(1.0, -1e-9, 0.3).unwrap());
        let b = env.sample(Dir::from_xyz(1.0, 1e-9, 0.3).unwrap());
        assert!((a - b).norm() < 1e-6);
    }

    #[test]
    fn envmap_shape_is_validated() {
        assert!(EnvMap::new(ImageRgb::new(10, 10)).is_err());
        assert!(EnvMap::new(ImageRgb::new(20, 10)).is_ok());
    }
}
