//! Relightable Gaussian-splat rendering and inverse fitting.
//!
//! The crate is organised bottom-up:
//!
//! * [`sphmath`] — real spherical harmonics, spherical Gaussians and
//!   numerical quadrature on the sphere.
//! * [`image`] — float-image containers with PFM input/output.
//! * [`scene`] — the Gaussian-cloud data model, eyeball geometry and
//!   binary serialization.
//! * [`lighting`] — light environments, SH projection and prefiltered
//!   specular environments.
//! * [`splatter`] — camera model, EWA projection and the tiled
//!   rasterizer (forward and reverse mode).
//! * [`appearance`] — radiance-transfer shading: diffuse SH, specular
//!   spherical Gaussians, view-dependent normals and visibility.
//! * [`fitter`] — losses, analytic gradients, the Adam optimizer and
//!   synthetic OLAT datasets.

pub mod appearance;
pub mod fitter;
pub mod image;
pub mod lighting;
pub mod scene;
pub mod sphmath;
pub mod splatter;

/// 3-component double vector: positions, scales, directions-in-the-making.
pub type Vec3 = nalgebra::Vector3<f64>;
/// Linear RGB triple.
pub type Rgb = nalgebra::Vector3<f64>;
pub type Vec2 = nalgebra::Vector2<f64>;
pub type Vec4 = nalgebra::Vector4<f64>;
pub type Mat2 = nalgebra::Matrix2<f64>;
pub type Mat3 = nalgebra::Matrix3<f64>;

/// Workspace-wide error type.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("{path}: bad file format: {reason}")]
    Format { path: String, reason: String },
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("optimization diverged at iteration {iteration}{}", match .last_checkpoint {
        Some(p) => format!(", last good checkpoint: {p}"),
        None => String::new(),
    })]
    Diverged { iteration: usize, last_checkpoint: Option<String> },
}

impl Error {
    pub fn format(path: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Format { path: path.into(), reason: reason.into() }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

/// Logistic squashing function.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Inverse of [`sigmoid`] on (0, 1).
pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// `ln(1 + eˣ)`, computed without overflow.
pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

/// Inverse of [`softplus`] for positive arguments.
pub fn softplus_inv(y: f64) -> f64 {
    debug_assert!(y > 0.0);
    if y > 30.0 {
        y
    } else {
        y.exp_m1().ln()
    }
}
