//! Spherical math: real spherical harmonics, spherical Gaussians,
//! reflection geometry and quadrature rules on S².

mod quadrature;
mod sg;
mod sh;

pub use quadrature::{fibonacci_sphere, gauss_legendre, sphere_integrate, sphere_integrate_rgb, SphereRule};
pub use sg::{
    sg_eval, sg_eval_cos, sg_grads_cos, sg_norm_constant, sg_sphere_integral,
    sg_sphere_integral_grad, SgLobe,
};
pub use sh::{
    num_coeffs, sh_basis, sh_basis_grad_into, sh_basis_into, sh_dot, sh_dot_scalar, sh_index,
    sh_project, sh_project_rgb, zh_rotate, ShVec, MAX_ORDER, Y00,
};

use crate::{Error, Result, Vec3};

/// Unit direction on S².
///
/// Constructors normalize; the wrapped vector always has unit norm
/// within 1e-9 (valid inputs) so downstream trig never leaves its domain.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Dir(Vec3);

impl Dir {
    /// Normalizes `v`; errors when `v` is too short to carry a direction.
    pub fn new(v: Vec3) -> Result<Dir> {
        let n = v.norm();
        if !n.is_finite() || n < 1e-12 {
            return Err(Error::InvalidArgument(format!(
                "cannot normalize near-zero vector ({}, {}, {})",
                v.x, v.y, v.z
            )));
        }
        Ok(Dir(v / n))
    }

    pub fn from_xyz(x: f64, y: f64, z: f64) -> Result<Dir> {
        Dir::new(Vec3::new(x, y, z))
    }

    /// Wraps a vector already known to be unit length (debug-asserted).
    pub fn from_unit(v: Vec3) -> Dir {
        debug_assert!((v.norm() - 1.0).abs() < 1e-9, "Dir::from_unit got |v| = {}", v.norm());
        Dir(v)
    }

    pub fn x() -> Dir {
        Dir(Vec3::new(1.0, 0.0, 0.0))
    }

    pub fn y() -> Dir {
        Dir(Vec3::new(0.0, 1.0, 0.0))
    }

    pub fn z() -> Dir {
        Dir(Vec3::new(0.0, 0.0, 1.0))
    }

    pub fn as_vec(&self) -> Vec3 {
        self.0
    }
}

impl std::ops::Deref for Dir {
    type Target = Vec3;
    fn deref(&self) -> &Vec3 {
        &self.0
    }
}

/// Mirror reflection of `w_o` about `n`: `q = 2(w_o·n)n − w_o`.
///
/// `w_o` points from the surface toward the camera (the usual graphics
/// convention), so for `w_o = n` the lobe axis is the normal itself.
pub fn reflect(w_o: Dir, n: Dir) -> Dir {
    let v = 2.0 * w_o.dot(&n) * n.as_vec() - w_o.as_vec();
    // Reflection of a unit vector is unit up to rounding.
    Dir(v.normalize())
}
