//! The Gaussian cloud: geometry, per-Gaussian radiance-transfer
//! parameters, eye geometry and serialization.

mod eyeball;
mod io;
pub mod presets;

pub use eyeball::{apply_eye_constraints, blend_field, eyeball_surface};
pub use io::{export_json, load_scene, save_scene};

use crate::sphmath::Dir;
use crate::{sigmoid, softplus, softplus_inv, Error, Mat3, Result, Rgb, Vec3, Vec4};

/// Lower clamp for the specular lobe width σ (radians).
pub const SIGMA_MIN: f64 = 0.01;
/// Upper clamp for the specular lobe width σ (radians).
pub const SIGMA_MAX: f64 = 1.5;

/// Number of monochrome transfer coefficients covering SH bands 4–8.
pub const D_M_LEN: usize = 65;
/// Number of RGB transfer coefficients covering SH bands 0–3.
pub const D_C_LEN: usize = 16;
/// Number of order-2 view-SH coefficients.
pub const VIEW_SH_LEN: usize = 9;

/// Which sub-model a Gaussian belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Group {
    Head,
    LeftEye,
    RightEye,
}

impl Group {
    pub fn is_eye(self) -> bool {
        matches!(self, Group::LeftEye | Group::RightEye)
    }

    pub(crate) fn to_u8(self) -> u8 {
        match self {
            Group::Head => 0,
            Group::LeftEye => 1,
            Group::RightEye => 2,
        }
    }

    pub(crate) fn from_u8(v: u8) -> Result<Group> {
        match v {
            0 => Ok(Group::Head),
            1 => Ok(Group::LeftEye),
            2 => Ok(Group::RightEye),
            other => Err(Error::InvalidArgument(format!("unknown group id {other}"))),
        }
    }
}

/// One 3D Gaussian primitive.
///
/// Rotation is a quaternion `(w, x, y, z)` kept unit-norm within 1e-6
/// between optimizer steps; scale is stored as log-scale and opacity as a
/// logit so every geometric parameter is unconstrained during fitting.
#[derive(Clone, Debug, PartialEq)]
pub struct Gaussian {
    pub pos: Vec3,
    pub quat: Vec4,
    pub log_scale: Vec3,
    pub opacity_logit: f64,
    pub group: Group,
}

impl Gaussian {
    pub fn scale(&self) -> Vec3 {
        self.log_scale.map(f64::exp)
    }

    pub fn opacity(&self) -> f64 {
        sigmoid(self.opacity_logit)
    }

    /// Rotation matrix of the (normalized) quaternion.
    pub fn rotation(&self) -> Mat3 {
        quat_to_rot(self.quat)
    }
}

/// Rotation matrix of `q = (w, x, y, z)` after normalization.
pub fn quat_to_rot(q: Vec4) -> Mat3 {
    let q = q / q.norm();
    let (w, x, y, z) = (q.x, q.y, q.z, q.w);
    Mat3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    )
}

/// World-space covariance `Σ = R·diag(s²)·Rᵀ`.
pub fn covariance(g: &Gaussian) -> Mat3 {
    let r = g.rotation();
    let s = g.scale();
    let d = Mat3::from_diagonal(&Vec3::new(s.x * s.x, s.y * s.y, s.z * s.z));
    r * d * r.transpose()
}

/// Per-Gaussian learnable radiance-transfer parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct TransferParams {
    /// Diffuse albedo ρ (≥ 0 at init; fitting keeps it soft via the
    /// negative-color penalty rather than a hard clamp).
    pub albedo: Rgb,
    /// RGB transfer coefficients for SH bands 0–3 (16 per channel).
    pub d_c: [Rgb; D_C_LEN],
    /// Monochrome transfer coefficients for SH bands 4–8 (65 values).
    pub d_m: [f64; D_M_LEN],
    /// Raw roughness; σ = min(σ_min + softplus(rough_raw), σ_max).
    pub rough_raw: f64,
    /// Base shading normal (unit).
    pub n_base: Vec3,
    /// Order-2 view-SH coefficients of the normal residual δn (3 channels).
    pub dn_view: [Vec3; VIEW_SH_LEN],
    /// Order-2 view-SH coefficients of the visibility logit.
    pub v_view: [f64; VIEW_SH_LEN],
    /// Eye groups only: order-2 view-SH of a view-conditioned albedo that
    /// replaces `albedo` entirely in the diffuse term.
    pub albedo_view: Option<[Rgb; VIEW_SH_LEN]>,
}

impl TransferParams {
    /// Mid-gray diffuse, no specular response, +z normal.
    pub fn neutral() -> TransferParams {
        TransferParams {
            albedo: Rgb::repeat(0.5),
            d_c: [Rgb::zeros(); D_C_LEN],
            d_m: [0.0; D_M_LEN],
            rough_raw: Self::rough_raw_for_sigma(0.2),
            n_base: Vec3::z(),
            dn_view: [Vec3::zeros(); VIEW_SH_LEN],
            v_view: [0.0; VIEW_SH_LEN],
            albedo_view: None,
        }
    }

    /// Effective lobe width σ ∈ [σ_min, σ_max].
    pub fn sigma(&self) -> f64 {
        (SIGMA_MIN + softplus(self.rough_raw)).min(SIGMA_MAX)
    }

    /// Raw value whose [`sigma`](Self::sigma) equals the given width.
    pub fn rough_raw_for_sigma(sigma: f64) -> f64 {
        assert!(sigma > SIGMA_MIN && sigma <= SIGMA_MAX, "sigma {sigma} out of range");
        softplus_inv(sigma - SIGMA_MIN)
    }
}

/// Two-sphere eyeball geometry: an eyeball sphere of radius `r_e` around
/// `center` smoothly unioned with a cornea sphere of radius `r_c` centered
/// `d` along the gaze direction.
#[derive(Clone, Debug, PartialEq)]
pub struct EyeballParams {
    pub r_e: f64,
    pub r_c: f64,
    pub d: f64,
    pub center: Vec3,
    pub gaze: Dir,
}

impl EyeballParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.r_e > 0.0 && self.r_c > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "eyeball radii must be positive (r_e {}, r_c {})",
                self.r_e, self.r_c
            )));
        }
        if !(0.0 <= self.d && self.d < self.r_e) {
            return Err(Error::InvalidArgument(format!(
                "cornea offset d = {} must lie in [0, r_e = {})",
                self.d, self.r_e
            )));
        }
        Ok(())
    }
}

/// The scene: Gaussians, their transfer parameters, optional eyeballs.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianCloud {
    pub gaussians: Vec<Gaussian>,
    pub transfer: Vec<TransferParams>,
    pub eye_left: Option<EyeballParams>,
    pub eye_right: Option<EyeballParams>,
    /// Set by [`apply_eye_constraints`]: eye-group positions, base normals
    /// and normal residuals are non-optimizable.
    pub eyes_frozen: bool,
    pub units_per_meter: f64,
}

impl GaussianCloud {
    pub fn new(gaussians: Vec<Gaussian>, transfer: Vec<TransferParams>) -> Result<GaussianCloud> {
        let cloud = GaussianCloud {
            gaussians,
            transfer,
            eye_left: None,
            eye_right: None,
            eyes_frozen: false,
            units_per_meter: 1.0,
        };
        cloud.validate()?;
        Ok(cloud)
    }

    pub fn len(&self) -> usize {
        self.gaussians.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gaussians.is_empty()
    }

    /// Checks structural invariants (not numeric fitness — see `save_scene`
    /// for the NaN sweep).
    pub fn validate(&self) -> Result<()> {
        if self.gaussians.len() != self.transfer.len() {
            return Err(Error::InvalidArgument(format!(
                "{} gaussians but {} transfer blocks",
                self.gaussians.len(),
                self.transfer.len()
            )));
        }
        for (i, g) in self.gaussians.iter().enumerate() {
            match g.group {
                Group::LeftEye if self.eye_left.is_none() => {
                    return Err(Error::InvalidArgument(format!(
                        "gaussian {i} is in the left-eye group but the cloud has no left eyeball"
                    )));
                }
                Group::RightEye if self.eye_right.is_none() => {
                    return Err(Error::InvalidArgument(format!(
                        "gaussian {i} is in the right-eye group but the cloud has no right eyeball"
                    )));
                }
                _ => {}
            }
            if (g.quat.norm() - 1.0).abs() > 1e-6 {
                return Err(Error::InvalidArgument(format!(
                    "gaussian {i} quaternion norm {} deviates from 1",
                    g.quat.norm()
                )));
            }
        }
        for (i, tp) in self.transfer.iter().enumerate() {
            let is_eye = self.gaussians[i].group.is_eye();
            if tp.albedo_view.is_some() && !is_eye {
                return Err(Error::InvalidArgument(format!(
                    "gaussian {i} carries view-conditioned albedo but is not in an eye group"
                )));
            }
        }
        if let Some(e) = &self.eye_left {
            e.validate()?;
        }
        if let Some(e) = &self.eye_right {
            e.validate()?;
        }
        Ok(())
    }

    /// Indices of Gaussians in `group`.
    pub fn group_indices(&self, group: Group) -> Vec<usize> {
        self.gaussians
            .iter()
            .enumerate()
            .filter(|(_, g)| g.group == group)
            .map(|(i, _)| i)
            .collect()
    }
}
