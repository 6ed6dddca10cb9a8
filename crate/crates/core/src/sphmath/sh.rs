//! Real spherical harmonics up to order 8.
//!
//! Index convention: `i = l·(l+1) + m` with `l` ascending and `m = −l..l`
//! (so the order-1 block is `[Y_{1,−1}, Y_{1,0}, Y_{1,1}]`, and so on).
//!
//! The basis is evaluated in Cartesian polynomial form: the azimuthal
//! factors `sin^m θ·{cos, sin}(mφ)` come from the complex power
//! `(x + iy)^m` and the polar factors from associated Legendre
//! polynomials with the `sin^m θ` part divided out. On the unit sphere
//! this equals the usual spherical-coordinate definition (Condon–Shortley
//! phase inside P, `√2·K_lm·{cos,sin}` for `m ≠ 0`), and it extends each
//! basis function to a degree-`l` polynomial on R³ whose exact Cartesian
//! gradient is what the fitting code chains through vector normalization.

use std::f64::consts::{PI, SQRT_2};
use std::sync::OnceLock;

use super::{Dir, SphereRule};
use crate::{Error, Rgb, Result, Vec3};

/// Highest supported SH order.
pub const MAX_ORDER: usize = 8;

/// The constant basis function `Y₀⁰ = 1/(2√π)`; a signal's mean equals
/// `Y00` times its DC coefficient.
pub const Y00: f64 = 0.282_094_791_773_878_14;

/// Number of basis functions through order `order`: `(order+1)²`.
pub const fn num_coeffs(order: usize) -> usize {
    (order + 1) * (order + 1)
}

/// Flat index of the `(l, m)` basis function.
pub fn sh_index(l: usize, m: i64) -> usize {
    debug_assert!(m.unsigned_abs() as usize <= l);
    (l * (l + 1)) as usize + (l as i64 + m) as usize - l
}

fn klm() -> &'static [[f64; MAX_ORDER + 1]; MAX_ORDER + 1] {
    static TABLE: OnceLock<[[f64; MAX_ORDER + 1]; MAX_ORDER + 1]> = OnceLock::new();
    TABLE.get_or_init(|| {
        let mut t = [[0.0; MAX_ORDER + 1]; MAX_ORDER + 1];
        for l in 0..=MAX_ORDER {
            for m in 0..=l {
                // (l−m)!/(l+m)! as a running product to stay exact in f64.
                let mut ratio = 1.0;
                for k in (l - m + 1)..=(l + m) {
                    ratio /= k as f64;
                }
                t[l][m] = ((2 * l + 1) as f64 / (4.0 * PI) * ratio).sqrt();
            }
        }
        t
    })
}

fn eval_impl(v: Vec3, order: usize, out: &mut [f64], mut grad: Option<&mut [Vec3]>) {
    assert!(order <= MAX_ORDER, "SH order {order} exceeds {MAX_ORDER}");
    let n = num_coeffs(order);
    assert!(out.len() >= n);
    let (x, y, z) = (v.x, v.y, v.z);
    let k = klm();

    // c[m] + i·s[m] = (x + iy)^m.
    let mut c = [0.0; MAX_ORDER + 1];
    let mut s = [0.0; MAX_ORDER + 1];
    c[0] = 1.0;
    for m in 1..=order {
        c[m] = x * c[m - 1] - y * s[m - 1];
        s[m] = x * s[m - 1] + y * c[m - 1];
    }

    // pt[l][m] = P_l^m(z) / sin^m θ (a polynomial in z); dpt = d/dz.
    let mut pt = [[0.0; MAX_ORDER + 1]; MAX_ORDER + 1];
    let mut dpt = [[0.0; MAX_ORDER + 1]; MAX_ORDER + 1];
    for m in 0..=order {
        let mut pmm = 1.0;
        for j in 1..=m {
            pmm *= -((2 * j - 1) as f64);
        }
        pt[m][m] = pmm;
        if m < order {
            pt[m + 1][m] = (2 * m + 1) as f64 * z * pmm;
            if grad.is_some() {
                dpt[m + 1][m] = (2 * m + 1) as f64 * pmm;
            }
            for l in (m + 2)..=order {
                let (lf, mf) = (l as f64, m as f64);
                pt[l][m] =
                    ((2.0 * lf - 1.0) * z * pt[l - 1][m] - (lf + mf - 1.0) * pt[l - 2][m]) / (lf - mf);
                if grad.is_some() {
                    dpt[l][m] = ((2.0 * lf - 1.0) * (pt[l - 1][m] + z * dpt[l - 1][m])
                        - (lf + mf - 1.0) * dpt[l - 2][m])
                        / (lf - mf);
                }
            }
        }
    }

    for l in 0..=order {
        let base = l * (l + 1);
        out[base] = k[l][0] * pt[l][0];
        if let Some(g) = grad.as_deref_mut() {
            g[base] = Vec3::new(0.0, 0.0, k[l][0] * dpt[l][0]);
        }
        for m in 1..=l {
            let kk = SQRT_2 * k[l][m];
            let pv = pt[l][m];
            out[base + m] = kk * c[m] * pv;
            out[base - m] = kk * s[m] * pv;
            if let Some(g) = grad.as_deref_mut() {
                let mf = m as f64;
                g[base + m] =
                    Vec3::new(kk * mf * c[m - 1] * pv, -kk * mf * s[m - 1] * pv, kk * c[m] * dpt[l][m]);
                g[base - m] =
                    Vec3::new(kk * mf * s[m - 1] * pv, kk * mf * c[m - 1] * pv, kk * s[m] * dpt[l][m]);
            }
        }
    }
}

/// Evaluates the basis through `order` into `out[..(order+1)²]`.
pub fn sh_basis_into(dir: Dir, order: usize, out: &mut [f64]) {
    eval_impl(dir.as_vec(), order, out, None);
}

/// Allocating convenience wrapper around [`sh_basis_into`].
pub fn sh_basis(dir: Dir, order: usize) -> Vec<f64> {
    let mut out = vec![0.0; num_coeffs(order)];
    sh_basis_into(dir, order, &mut out);
    out
}

/// Basis values plus the Cartesian gradient of the polynomial extension.
///
/// The gradient treats (x, y, z) as free coordinates; callers evaluating at
/// `normalize(m)` compose it with the normalization Jacobian
/// `(I − n nᵀ)/‖m‖` to differentiate with respect to the raw vector `m`.
pub fn sh_basis_grad_into(dir: Dir, order: usize, out: &mut [f64], grad: &mut [Vec3]) {
    assert!(grad.len() >= num_coeffs(order));
    eval_impl(dir.as_vec(), order, out, Some(grad));
}

/// Spherical-harmonic coefficient vector, 1 or 3 channels, interleaved
/// storage (`coeffs[i·channels + ch]`).
#[derive(Clone, Debug, PartialEq)]
pub struct ShVec {
    order: usize,
    channels: usize,
    coeffs: Vec<f64>,
}

impl ShVec {
    pub fn zeros(order: usize, channels: usize) -> ShVec {
        assert!(order <= MAX_ORDER);
        assert!(channels == 1 || channels == 3, "1 or 3 channels supported");
        ShVec { order, channels, coeffs: vec![0.0; num_coeffs(order) * channels] }
    }

    pub fn from_coeffs(order: usize, channels: usize, coeffs: Vec<f64>) -> Result<ShVec> {
        if order > MAX_ORDER || (channels != 1 && channels != 3) {
            return Err(Error::InvalidArgument(format!(
                "unsupported SH shape: order {order}, {channels} channels"
            )));
        }
        if coeffs.len() != num_coeffs(order) * channels {
            return Err(Error::InvalidArgument(format!(
                "SH coefficient count {} does not match order {order} × {channels} channels",
                coeffs.len()
            )));
        }
        Ok(ShVec { order, channels, coeffs })
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn num_coeffs(&self) -> usize {
        num_coeffs(self.order)
    }

    pub fn coeff(&self, i: usize, ch: usize) -> f64 {
        self.coeffs[i * self.channels + ch.min(self.channels - 1)]
    }

    pub fn coeff_mut(&mut self, i: usize, ch: usize) -> &mut f64 {
        let channels = self.channels;
        &mut self.coeffs[i * channels + ch.min(channels - 1)]
    }

    /// Coefficient `i` as RGB; mono vectors broadcast to all channels.
    pub fn rgb(&self, i: usize) -> Rgb {
        match self.channels {
            1 => Rgb::repeat(self.coeffs[i]),
            _ => Rgb::new(self.coeffs[i * 3], self.coeffs[i * 3 + 1], self.coeffs[i * 3 + 2]),
        }
    }

    pub fn set_rgb(&mut self, i: usize, v: Rgb) {
        assert_eq!(self.channels, 3);
        self.coeffs[i * 3] = v.x;
        self.coeffs[i * 3 + 1] = v.y;
        self.coeffs[i * 3 + 2] = v.z;
    }

    pub fn coeffs(&self) -> &[f64] {
        &self.coeffs
    }

    pub fn coeffs_mut(&mut self) -> &mut [f64] {
        &mut self.coeffs
    }

    /// Reconstructs the band-limited function at `dir` (RGB; mono broadcast).
    pub fn eval(&self, dir: Dir) -> Rgb {
        let mut basis = [0.0; num_coeffs(MAX_ORDER)];
        sh_basis_into(dir, self.order, &mut basis);
        let mut acc = Rgb::zeros();
        for i in 0..self.num_coeffs() {
            acc += basis[i] * self.rgb(i);
        }
        acc
    }

    pub fn scaled(&self, s: f64) -> ShVec {
        let mut out = self.clone();
        for c in &mut out.coeffs {
            *c *= s;
        }
        out
    }

    pub fn add(&self, other: &ShVec) -> Result<ShVec> {
        if self.order != other.order || self.channels != other.channels {
            return Err(Error::InvalidArgument("SH shape mismatch in add".into()));
        }
        let mut out = self.clone();
        for (a, b) in out.coeffs.iter_mut().zip(&other.coeffs) {
            *a += b;
        }
        Ok(out)
    }
}

/// Per-channel dot product `Σ_i a_i·b_i`, broadcasting mono against RGB.
///
/// For band-limited functions this equals `∫ A(ω)B(ω) dω` by orthonormality.
pub fn sh_dot(a: &ShVec, b: &ShVec) -> Result<Rgb> {
    if a.order != b.order {
        return Err(Error::InvalidArgument(format!(
            "SH order mismatch in dot: {} vs {}",
            a.order, b.order
        )));
    }
    let mut acc = Rgb::zeros();
    for i in 0..a.num_coeffs() {
        acc += a.rgb(i).component_mul(&b.rgb(i));
    }
    Ok(acc)
}

/// Scalar dot product of two mono vectors.
pub fn sh_dot_scalar(a: &ShVec, b: &ShVec) -> Result<f64> {
    if a.channels != 1 || b.channels != 1 {
        return Err(Error::InvalidArgument("sh_dot_scalar needs mono vectors".into()));
    }
    Ok(sh_dot(a, b)?.x)
}

/// Projects a scalar spherical function onto the basis with `rule`.
pub fn sh_project(order: usize, rule: &SphereRule, mut f: impl FnMut(Dir) -> f64) -> ShVec {
    let mut out = ShVec::zeros(order, 1);
    let mut basis = [0.0; num_coeffs(MAX_ORDER)];
    let n = num_coeffs(order);
    for &(d, w) in &rule.nodes {
        let fv = w * f(d);
        sh_basis_into(d, order, &mut basis);
        for i in 0..n {
            out.coeffs[i] += fv * basis[i];
        }
    }
    out
}

/// Projects an RGB spherical function onto the basis with `rule`.
pub fn sh_project_rgb(order: usize, rule: &SphereRule, mut f: impl FnMut(Dir) -> Rgb) -> ShVec {
    let mut out = ShVec::zeros(order, 3);
    let mut basis = [0.0; num_coeffs(MAX_ORDER)];
    let n = num_coeffs(order);
    for &(d, w) in &rule.nodes {
        let fv = f(d) * w;
        sh_basis_into(d, order, &mut basis);
        for i in 0..n {
            out.coeffs[i * 3] += fv.x * basis[i];
            out.coeffs[i * 3 + 1] += fv.y * basis[i];
            out.coeffs[i * 3 + 2] += fv.z * basis[i];
        }
    }
    out
}

/// Rotates a zonal (m = 0 only) expansion to point along `axis`.
///
/// For `f(ω) = Σ_l z_l·Y_{l,0}(ω)` about +z, the coefficients about `axis`
/// are `z_l·√(4π/(2l+1))·Y_{l,m}(axis)`.
pub fn zh_rotate(zonal: &[f64], axis: Dir) -> ShVec {
    let order = zonal.len() - 1;
    let mut out = ShVec::zeros(order, 1);
    let mut basis = [0.0; num_coeffs(MAX_ORDER)];
    sh_basis_into(axis, order, &mut basis);
    for l in 0..=order {
        let scale = zonal[l] * (4.0 * PI / (2 * l + 1) as f64).sqrt();
        for m in -(l as i64)..=(l as i64) {
            let i = sh_index(l, m);
            out.coeffs[i] = scale * basis[i];
        }
    }
    out
}
