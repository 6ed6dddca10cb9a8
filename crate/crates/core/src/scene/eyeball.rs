//! Two-sphere eyeball surface: a smooth union of the eyeball sphere and
//! the corneal sphere, sampled into positions and outward normals.

use super::{EyeballParams, GaussianCloud, Group};
use crate::sphmath::fibonacci_sphere;
use crate::{Result, Vec3};

/// Smooth-max sharpness (per scene unit of length).
const BLEND_SHARPNESS: f64 = 50.0;

/// Inside-positive blended field: log-sum-exp smooth max of the two
/// signed sphere fields `r − |x − c|`. Zero level set = eye surface.
pub fn blend_field(e: &EyeballParams, x: Vec3) -> f64 {
    let fe = e.r_e - (x - e.center).norm();
    let fc = e.r_c - (x - cornea_center(e)).norm();
    let m = fe.max(fc);
    m + ((BLEND_SHARPNESS * (fe - m)).exp() + (BLEND_SHARPNESS * (fc - m)).exp()).ln()
        / BLEND_SHARPNESS
}

fn cornea_center(e: &EyeballParams) -> Vec3 {
    e.center + e.d * e.gaze.as_vec()
}

/// Outward unit normal of the blend at a surface point: the softmax-weighted
/// combination of the two radial directions (the exact negated gradient of
/// [`blend_field`], normalized).
fn blend_normal(e: &EyeballParams, x: Vec3) -> Vec3 {
    let re = x - e.center;
    let rc = x - cornea_center(e);
    let fe = e.r_e - re.norm();
    let fc = e.r_c - rc.norm();
    let m = fe.max(fc);
    let we = (BLEND_SHARPNESS * (fe - m)).exp();
    let wc = (BLEND_SHARPNESS * (fc - m)).exp();
    (we * re.normalize() + wc * rc.normalize()).normalize()
}

/// Whether the cornea sphere pokes out of the eyeball sphere at all.
fn cornea_contributes(e: &EyeballParams) -> bool {
    e.d + e.r_c > e.r_e
}

/// Samples `n_samples` (position, outward normal) pairs on the blended
/// surface, near-uniformly over directions from the eyeball center.
///
/// Degenerate parameters (cornea entirely inside the eyeball) fall back to
/// the pure eyeball sphere with a warning.
pub fn eyeball_surface(e: &EyeballParams, n_samples: usize) -> Result<Vec<(Vec3, Vec3)>> {
    e.validate()?;
    let dirs = fibonacci_sphere(n_samples);
    if !cornea_contributes(e) {
        log::warn!(
            "cornea (r_c {} at offset {}) lies inside the eyeball (r_e {}); returning a pure sphere",
            e.r_c,
            e.d,
            e.r_e
        );
        return Ok(dirs
            .into_iter()
            .map(|u| (e.center + e.r_e * u.as_vec(), u.as_vec()))
            .collect());
    }

    let r_max = e.r_e + e.d + e.r_c;
    Ok(dirs
        .into_iter()
        .map(|u| {
            let u = u.as_vec();
            // March inward from well outside until the field turns positive,
            // then bisect the bracket; this lands on the outermost crossing.
            let field_at = |r: f64| blend_field(e, e.center + r * u);
            let steps = 512;
            let mut hi = r_max * 1.05;
            let mut lo = hi;
            for i in 1..=steps {
                let r = r_max * 1.05 * (1.0 - i as f64 / steps as f64);
                if field_at(r) > 0.0 {
                    lo = r;
                    break;
                }
                hi = r;
            }
            for _ in 0..80 {
                let mid = 0.5 * (lo + hi);
                if field_at(mid) > 0.0 {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            let r = 0.5 * (lo + hi);
            let p = e.center + r * u;
            (p, blend_normal(e, p))
        })
        .collect())
}

/// Freezes eye-group Gaussians onto their eyeball surfaces: positions are
/// snapped to surface samples, base normals set to the surface normals,
/// normal residuals zeroed, and the cloud is flagged so the fitter keeps
/// these quantities fixed.
pub fn apply_eye_constraints(cloud: &mut GaussianCloud) -> Result<()> {
    cloud.validate()?;
    for group in [Group::LeftEye, Group::RightEye] {
        let indices = cloud.group_indices(group);
        if indices.is_empty() {
            continue;
        }
        let params = match group {
            Group::LeftEye => cloud.eye_left.clone().expect("validated above"),
            _ => cloud.eye_right.clone().expect("validated above"),
        };
        let samples = eyeball_surface(&params, indices.len())?;
        for (&i, (pos, normal)) in indices.iter().zip(samples) {
            cloud.gaussians[i].pos = pos;
            cloud.transfer[i].n_base = normal;
            cloud.transfer[i].dn_view = [Vec3::zeros(); super::VIEW_SH_LEN];
        }
    }
    cloud.eyes_frozen = true;
    Ok(())
}
