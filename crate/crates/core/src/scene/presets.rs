//! Procedural reference scenes with physically grounded transfer
//! parameters, plus the parameter jitter used by recovery experiments.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::{
    apply_eye_constraints, EyeballParams, Gaussian, GaussianCloud, Group, TransferParams, D_C_LEN,
    D_M_LEN, VIEW_SH_LEN,
};
use crate::sphmath::{fibonacci_sphere, sh_basis_into, Dir, SphereRule};
use crate::{logit, Result, Rgb, Vec3, Vec4};

/// Exact zonal coefficients of the clamped cosine `max(0, cos θ)`
/// (piecewise Gauss–Legendre; odd bands ≥ 3 vanish).
pub const CLAMPED_COSINE_ZONAL: [f64; 9] = [
    0.8862269254527582,
    1.0233267079464885,
    0.4954159122007515,
    0.0,
    -0.11077836568159494,
    0.0,
    0.04992713470963567,
    0.0,
    -0.028546931421158286,
];

/// Quaternion (w, x, y, z) rotating +z onto `dir`.
fn quat_z_to(dir: Vec3) -> Vec4 {
    let z = Vec3::z();
    let d = dir.normalize();
    let c = z.dot(&d);
    if c > 1.0 - 1e-12 {
        return Vec4::new(1.0, 0.0, 0.0, 0.0);
    }
    if c < -1.0 + 1e-12 {
        // 180° about x.
        return Vec4::new(0.0, 1.0, 0.0, 0.0);
    }
    let axis = z.cross(&d).normalize();
    let half = 0.5 * c.acos();
    let s = half.sin();
    Vec4::new(half.cos(), axis.x * s, axis.y * s, axis.z * s)
}

/// Precomputed SH basis at every node of a rule, for batch projections.
struct BasisCache {
    rule: SphereRule,
    basis: Vec<[f64; 81]>,
}

impl BasisCache {
    fn new(rule: SphereRule) -> BasisCache {
        let basis = rule
            .nodes
            .iter()
            .map(|&(d, _)| {
                let mut b = [0.0; 81];
                sh_basis_into(d, 8, &mut b);
                b
            })
            .collect();
        BasisCache { rule, basis }
    }

    /// Projects a scalar function onto the order-8 basis.
    fn project(&self, mut f: impl FnMut(Dir) -> f64) -> [f64; 81] {
        let mut out = [0.0; 81];
        for (&(d, w), basis) in self.rule.nodes.iter().zip(&self.basis) {
            let fw = w * f(d);
            for i in 0..81 {
                out[i] += fw * basis[i];
            }
        }
        out
    }
}

/// Splits a full order-8 transfer into the stored (d_c, d_m) blocks.
fn split_transfer(t: [f64; 81]) -> ([Rgb; D_C_LEN], [f64; D_M_LEN]) {
    let mut d_c = [Rgb::zeros(); D_C_LEN];
    let mut d_m = [0.0; D_M_LEN];
    for i in 0..D_C_LEN {
        d_c[i] = Rgb::repeat(t[i]);
    }
    for i in 0..D_M_LEN {
        d_m[i] = t[D_C_LEN + i];
    }
    (d_c, d_m)
}

fn smooth_albedo(p: Vec3) -> Rgb {
    // Smooth, strictly positive spatial variation so albedo is identifiable.
    Rgb::new(
        0.45 + 0.25 * (2.1 * p.x + 0.4).sin(),
        0.40 + 0.22 * (1.7 * p.y - 0.8).cos(),
        0.42 + 0.20 * (2.5 * p.z + 1.3).sin(),
    )
}

fn surface_gaussian(
    pos: Vec3,
    normal: Vec3,
    tangent_scale: f64,
    thickness: f64,
    opacity: f64,
    group: Group,
) -> Gaussian {
    Gaussian {
        pos,
        quat: quat_z_to(normal),
        log_scale: Vec3::new(tangent_scale.ln(), tangent_scale.ln(), thickness.ln()),
        opacity_logit: logit(opacity),
        group,
    }
}

fn base_transfer(
    rng: &mut ChaCha8Rng,
    cache: &BasisCache,
    normal: Vec3,
    albedo: Rgb,
    sigma: f64,
    visibility: fn(Dir) -> bool,
) -> TransferParams {
    // Lambertian radiance transfer around the normal, masked by the scene's
    // directional visibility: t(ω) = V(ω)·max(0, ω·n)/π.
    let t = cache.project(|d| {
        if visibility(d) {
            d.dot(&normal).max(0.0) / std::f64::consts::PI
        } else {
            0.0
        }
    });
    let (d_c, d_m) = split_transfer(t);
    let mut v_view = [0.0; VIEW_SH_LEN];
    // DC visibility ≈ 0.8 with mild view dependence.
    v_view[0] = logit(0.75 + 0.1 * rng.gen_range(-1.0..1.0)) / 0.28209479177387814;
    for coeff in v_view.iter_mut().skip(1) {
        *coeff = rng.gen_range(-0.15..0.15);
    }
    let mut dn_view = [Vec3::zeros(); VIEW_SH_LEN];
    for dn in dn_view.iter_mut() {
        *dn = Vec3::new(
            rng.gen_range(-0.02..0.02),
            rng.gen_range(-0.02..0.02),
            rng.gen_range(-0.02..0.02),
        );
    }
    TransferParams {
        albedo,
        d_c,
        d_m,
        rough_raw: TransferParams::rough_raw_for_sigma(sigma),
        n_base: normal,
        dn_view,
        v_view,
        albedo_view: None,
    }
}

fn everything_visible(_: Dir) -> bool {
    true
}

/// Gaussian-shell sphere of radius 1 with Lambertian transfer, smoothly
/// varying albedo and roughness. The "standard scene" of the fitting
/// experiments.
pub fn sphere_scene(n: usize, seed: u64) -> GaussianCloud {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cache = BasisCache::new(SphereRule::product(128, 128));
    let dirs = fibonacci_sphere(n);
    let tangent = (4.0 * std::f64::consts::PI / n as f64).sqrt() * 0.7;
    let mut gaussians = Vec::with_capacity(n);
    let mut transfer = Vec::with_capacity(n);
    for u in dirs {
        let normal = u.as_vec();
        let pos = normal;
        gaussians.push(surface_gaussian(
            pos,
            normal,
            tangent * rng.gen_range(0.85..1.15),
            tangent * 0.25,
            rng.gen_range(0.75..0.92),
            Group::Head,
        ));
        let sigma = 0.12 + 0.15 * (0.5 + 0.5 * (3.0 * pos.x).sin());
        transfer.push(base_transfer(
            &mut rng,
            &cache,
            normal,
            smooth_albedo(pos),
            sigma,
            everything_visible,
        ));
    }
    GaussianCloud::new(gaussians, transfer).expect("preset is structurally valid")
}

/// Disk occluder hovering above the sphere's +z pole.
#[derive(Clone, Copy, Debug)]
pub struct OccluderDisk {
    pub center: Vec3,
    pub normal: Vec3,
    pub radius: f64,
}

impl OccluderDisk {
    fn standard() -> OccluderDisk {
        OccluderDisk {
            center: Vec3::new(0.0, 0.0, 1.9),
            normal: Vec3::z(),
            radius: 0.55,
        }
    }

    /// Does the ray `p + t·ω` (t > 0) hit the disk?
    pub fn blocks(&self, p: Vec3, omega: Dir) -> bool {
        let denom = omega.dot(&self.normal);
        if denom.abs() < 1e-9 {
            return false;
        }
        let t = (self.center - p).dot(&self.normal) / denom;
        if t <= 1e-9 {
            return false;
        }
        let hit = p + t * omega.as_vec();
        (hit - self.center).norm() < self.radius
    }
}

/// A sphere scene shadowed by a floating disk, plus its unshadowed twin
/// (identical geometry, occlusion-free transfer) for shadow-mask oracles.
pub struct OccluderScene {
    pub cloud: GaussianCloud,
    pub unshadowed: GaussianCloud,
    pub disk: OccluderDisk,
}

/// Sphere + floating disk occluder. The sphere Gaussians' transfer bakes in
/// the disk's hard shadow, which needs SH bands above 3 to stay sharp.
pub fn occluder_scene(n_sphere: usize, n_disk: usize, seed: u64) -> OccluderScene {
    let disk = OccluderDisk::standard();
    let mut cloud = sphere_scene(n_sphere, seed);
    let cache = BasisCache::new(SphereRule::product(128, 128));

    // Re-project the sphere transfers with the disk shadow folded in.
    let shadowed: Vec<([Rgb; D_C_LEN], [f64; D_M_LEN])> = cloud
        .gaussians
        .par_iter()
        .map(|g| {
            let n = g.pos.normalize();
            let t = cache.project(|d| {
                if disk.blocks(g.pos, d) {
                    0.0
                } else {
                    d.dot(&n).max(0.0) / std::f64::consts::PI
                }
            });
            split_transfer(t)
        })
        .collect();
    let unshadowed = cloud.clone();
    for (tp, (d_c, d_m)) in cloud.transfer.iter_mut().zip(shadowed) {
        tp.d_c = d_c;
        tp.d_m = d_m;
    }

    // The disk itself: a ring + fill of flat Gaussians.
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x0cc1);
    let mut gaussians = Vec::with_capacity(n_disk);
    let mut transfer = Vec::with_capacity(n_disk);
    let spacing = disk.radius * (std::f64::consts::PI / n_disk as f64).sqrt() * 1.6;
    for i in 0..n_disk {
        // Sunflower layout over the disk.
        let frac = (i as f64 + 0.5) / n_disk as f64;
        let r = disk.radius * frac.sqrt() * 0.98;
        let phi = i as f64 * std::f64::consts::PI * (3.0 - 5.0f64.sqrt());
        let pos = disk.center + Vec3::new(r * phi.cos(), r * phi.sin(), 0.0);
        gaussians.push(surface_gaussian(
            pos,
            -disk.normal,
            spacing,
            spacing * 0.1,
            0.95,
            Group::Head,
        ));
        transfer.push(base_transfer(
            &mut rng,
            &cache,
            -disk.normal,
            Rgb::repeat(0.25),
            0.4,
            everything_visible,
        ));
    }
    for (g, tp) in gaussians.into_iter().zip(transfer) {
        cloud.gaussians.push(g.clone());
        cloud.transfer.push(tp);
        // A second, upward-facing sheet (same position/scale) so the disk is
        // lit from above too.
        let mut up = g;
        up.quat = quat_z_to(disk.normal);
        let tp_up = base_transfer(
            &mut rng,
            &cache,
            disk.normal,
            Rgb::repeat(0.25),
            0.4,
            everything_visible,
        );
        cloud.gaussians.push(up);
        cloud.transfer.push(tp_up);
    }
    cloud.validate().expect("occluder preset valid");
    let mut unshadowed_full = unshadowed;
    // The twin shares the disk geometry so renders are comparable.
    unshadowed_full
        .gaussians
        .extend_from_slice(&cloud.gaussians[n_sphere..]);
    unshadowed_full
        .transfer
        .extend_from_slice(&cloud.transfer[n_sphere..]);
    OccluderScene { cloud, unshadowed: unshadowed_full, disk }
}

/// Head sphere with two eyeball groups, constraints applied.
pub fn eye_scene(n_head: usize, n_per_eye: usize, seed: u64) -> Result<GaussianCloud> {
    let mut cloud = sphere_scene(n_head, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xe7e);
    let cache = BasisCache::new(SphereRule::product(128, 128));
    let eyes = [
        (
            Group::LeftEye,
            EyeballParams {
                r_e: 0.22,
                r_c: 0.13,
                d: 0.13,
                center: Vec3::new(-0.38, 0.25, 0.82).normalize() * 0.95,
                gaze: Dir::from_xyz(-0.25, 0.1, 1.0)?,
            },
        ),
        (
            Group::RightEye,
            EyeballParams {
                r_e: 0.22,
                r_c: 0.13,
                d: 0.13,
                center: Vec3::new(0.38, 0.25, 0.82).normalize() * 0.95,
                gaze: Dir::from_xyz(0.25, 0.1, 1.0)?,
            },
        ),
    ];
    for (group, params) in eyes {
        match group {
            Group::LeftEye => cloud.eye_left = Some(params.clone()),
            _ => cloud.eye_right = Some(params.clone()),
        }
        let tangent = (4.0 * std::f64::consts::PI * params.r_e * params.r_e / n_per_eye as f64)
            .sqrt()
            * 0.8;
        for _ in 0..n_per_eye {
            // Positions/normals are placeholders; apply_eye_constraints snaps
            // them to the blended surface.
            let sigma = 0.05 + rng.gen_range(0.0..0.03);
            let mut tp = base_transfer(
                &mut rng,
                &cache,
                Vec3::z(),
                Rgb::repeat(0.6),
                sigma,
                everything_visible,
            );
            let mut albedo_view = [Rgb::zeros(); VIEW_SH_LEN];
            // DC carries the base tint; higher bands add gentle view shift.
            let tint = Rgb::new(
                0.55 + rng.gen_range(-0.1..0.1),
                0.5 + rng.gen_range(-0.1..0.1),
                0.5 + rng.gen_range(-0.1..0.1),
            );
            albedo_view[0] = tint / 0.28209479177387814;
            for coeff in albedo_view.iter_mut().skip(1) {
                *coeff = Rgb::repeat(rng.gen_range(-0.05..0.05));
            }
            tp.albedo_view = Some(albedo_view);
            cloud.transfer.push(tp);
            cloud.gaussians.push(surface_gaussian(
                params.center,
                Vec3::z(),
                tangent,
                tangent * 0.2,
                0.93,
                group,
            ));
        }
    }
    apply_eye_constraints(&mut cloud)?;
    Ok(cloud)
}

/// Multiplies `v` by a random factor in `[1 − rel, 1 + rel]`.
fn jitter_mul(rng: &mut ChaCha8Rng, v: f64, rel: f64) -> f64 {
    v * (1.0 + rng.gen_range(-rel..rel))
}

fn jitter_rotation(rng: &mut ChaCha8Rng, v: Vec3, angle: f64) -> Vec3 {
    let axis = Vec3::new(
        rng.gen_range(-1.0..1.0),
        rng.gen_range(-1.0..1.0),
        rng.gen_range(-1.0..1.0),
    );
    if axis.norm() < 1e-9 {
        return v;
    }
    let rot = nalgebra::Rotation3::from_axis_angle(
        &nalgebra::Unit::new_normalize(axis),
        rng.gen_range(-angle..angle),
    );
    rot * v
}

/// Relative parameter jitter for recovery experiments: multiplicative noise
/// of magnitude `rel` on scales/colors/transfer, `rel`-radian rotation noise
/// on orientations, position noise of `rel` × local scale. Frozen eye
/// quantities are left untouched.
pub fn jitter_cloud(cloud: &GaussianCloud, rel: f64, seed: u64) -> GaussianCloud {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = cloud.clone();
    for i in 0..out.len() {
        let frozen_eye = out.eyes_frozen && out.gaussians[i].group.is_eye();
        let mean_scale = out.gaussians[i].scale().mean();
        {
            let g = &mut out.gaussians[i];
            if !frozen_eye {
                for a in 0..3 {
                    g.pos[a] += rng.gen_range(-rel..rel) * mean_scale;
                }
            }
            let dq = Vec4::new(
                1.0,
                rng.gen_range(-rel..rel) * 0.5,
                rng.gen_range(-rel..rel) * 0.5,
                rng.gen_range(-rel..rel) * 0.5,
            );
            g.quat = quat_mul(g.quat, dq).normalize();
            for a in 0..3 {
                g.log_scale[a] += rng.gen_range(-rel..rel);
            }
            g.opacity_logit += rng.gen_range(-rel..rel);
        }
        let tp = &mut out.transfer[i];
        for a in 0..3 {
            tp.albedo[a] = jitter_mul(&mut rng, tp.albedo[a], rel);
        }
        for c in tp.d_c.iter_mut() {
            for a in 0..3 {
                c[a] = jitter_mul(&mut rng, c[a], rel);
            }
        }
        for m in tp.d_m.iter_mut() {
            *m = jitter_mul(&mut rng, *m, rel);
        }
        let sigma = jitter_mul(&mut rng, tp.sigma(), rel)
            .clamp(super::SIGMA_MIN + 1e-4, super::SIGMA_MAX);
        tp.rough_raw = TransferParams::rough_raw_for_sigma(sigma);
        if !frozen_eye {
            tp.n_base = jitter_rotation(&mut rng, tp.n_base, rel).normalize();
            for dn in tp.dn_view.iter_mut() {
                for a in 0..3 {
                    dn[a] = jitter_mul(&mut rng, dn[a], rel);
                }
            }
        }
        for v in tp.v_view.iter_mut() {
            *v = jitter_mul(&mut rng, *v, rel);
        }
        if let Some(av) = &mut tp.albedo_view {
            for c in av.iter_mut() {
                for a in 0..3 {
                    c[a] = jitter_mul(&mut rng, c[a], rel);
                }
            }
        }
    }
    out
}

/// Hamilton product of two (w, x, y, z) quaternions.
fn quat_mul(a: Vec4, b: Vec4) -> Vec4 {
    Vec4::new(
        a.x * b.x - a.y * b.y - a.z * b.z - a.w * b.w,
        a.x * b.y + a.y * b.x + a.z * b.w - a.w * b.z,
        a.x * b.z - a.y * b.w + a.z * b.x + a.w * b.y,
        a.x * b.w + a.y * b.z - a.z * b.y + a.w * b.x,
    )
}

/// Fully random (but structurally valid) head-only cloud for serialization
/// and property tests.
pub fn random_cloud(n: usize, seed: u64) -> GaussianCloud {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut gaussians = Vec::with_capacity(n);
    let mut transfer = Vec::with_capacity(n);
    for _ in 0..n {
        let q = Vec4::new(
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
        );
        let q = if q.norm() < 1e-3 { Vec4::new(1.0, 0.0, 0.0, 0.0) } else { q.normalize() };
        gaussians.push(Gaussian {
            pos: Vec3::new(
                rng.gen_range(-2.0..2.0),
                rng.gen_range(-2.0..2.0),
                rng.gen_range(-2.0..2.0),
            ),
            quat: q,
            log_scale: Vec3::new(
                rng.gen_range(-3.0..0.5),
                rng.gen_range(-3.0..0.5),
                rng.gen_range(-3.0..0.5),
            ),
            opacity_logit: rng.gen_range(-3.0..3.0),
            group: Group::Head,
        });
        let mut tp = TransferParams::neutral();
        tp.albedo = Rgb::new(rng.gen(), rng.gen(), rng.gen());
        for c in tp.d_c.iter_mut() {
            *c = Rgb::new(
                rng.gen_range(-0.5..0.5),
                rng.gen_range(-0.5..0.5),
                rng.gen_range(-0.5..0.5),
            );
        }
        for m in tp.d_m.iter_mut() {
            *m = rng.gen_range(-0.2..0.2);
        }
        tp.rough_raw = rng.gen_range(-3.0..1.0);
        tp.n_base = jitter_rotation(&mut rng, Vec3::z(), 3.0).normalize();
        for dn in tp.dn_view.iter_mut() {
            *dn = Vec3::new(
                rng.gen_range(-0.1..0.1),
                rng.gen_range(-0.1..0.1),
                rng.gen_range(-0.1..0.1),
            );
        }
        for v in tp.v_view.iter_mut() {
            *v = rng.gen_range(-1.0..1.0);
        }
        transfer.push(tp);
    }
    GaussianCloud::new(gaussians, transfer).expect("random cloud valid")
}
