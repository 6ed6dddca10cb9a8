//! Numerical validation of the factored specular model.
//!
//! The shading path approximates the full rendering-equation specular
//! integral
//!
//! ```text
//! c_full = ∫ L(ω) · V(ω) · M(ω, ω_o) · max(0, ω·n) · G(ω; q, σ) dω
//! ```
//!
//! (`M` = Fresnel × shadowing/masking × normalization of a microfacet BRDF,
//! `G` = the spherical-Gaussian NDF lobe around the mirror direction `q`)
//! by freezing every view-dependent factor at the lobe axis and learning the
//! product as the scalar visibility gate:
//!
//! ```text
//! c_fact = v(ω_o) · ∫ L(ω) · G(ω; q, σ) dω ,   v = M(q, ω_o) · max(0, q·n)
//! ```
//!
//! with occlusion V ≡ 1 here. This module quantifies the factorization
//! error for an analytic microfacet `M` over grids of lobe width σ and view
//! angle — a documented validation, not a runtime path: narrow lobes near
//! normal incidence are tight, wide lobes and grazing views drift, which is
//! exactly the regime where the learned gate absorbs the differences.

use crate::sphmath::gauss_legendre;
use crate::sphmath::sg_eval_cos;
use crate::{Result, Vec3};
use std::io::Write;
use std::path::Path;

/// Analytic microfacet view factor: Schlick Fresnel at the half vector
/// times Smith shadowing/masking for both directions, with the standard
/// `π (ω_i·n)(ω_o·n)` normalization.
#[derive(Clone, Copy, Debug)]
pub struct MicrofacetM {
    /// Normal-incidence reflectance (Fresnel F₀).
    pub f0: f64,
    /// GGX-style roughness entering the Smith terms.
    pub roughness: f64,
}

impl MicrofacetM {
    /// A smooth dielectric: F₀ = 0.04, roughness 0.1.
    pub fn smooth() -> MicrofacetM {
        MicrofacetM { f0: 0.04, roughness: 0.1 }
    }

    fn smith(&self, cos_nw: f64) -> f64 {
        let a2 = self.roughness * self.roughness;
        2.0 * cos_nw / (cos_nw + (a2 + (1.0 - a2) * cos_nw * cos_nw).sqrt())
    }

    /// Evaluates `M(ω_i, ω_o)` for unit vectors; zero below the horizon.
    pub fn eval(&self, w_o: Vec3, w_i: Vec3, n: Vec3) -> f64 {
        let ci = w_i.dot(&n);
        let co = w_o.dot(&n);
        if ci <= 1e-9 || co <= 1e-9 {
            return 0.0;
        }
        let h = (w_i + w_o).normalize();
        let fresnel = self.f0 + (1.0 - self.f0) * (1.0 - h.dot(&w_o).max(0.0)).powi(5);
        fresnel * self.smith(ci) * self.smith(co) / (std::f64::consts::PI * ci * co)
    }
}

/// `∫ f(ω) · G(ω; q, σ) dω` by a polar ring rule around the lobe axis:
/// Gauss–Legendre in the polar angle over `[0, min(7σ, π)]` (the lobe
/// carries < 3e-11 of its mass beyond 7σ) times a uniform azimuthal rule.
pub fn lobe_integral(q: Vec3, sigma: f64, mut f: impl FnMut(Vec3) -> f64) -> f64 {
    let helper = if q.x.abs() < 0.9 { Vec3::x() } else { Vec3::y() };
    let e1 = q.cross(&helper).normalize();
    let e2 = q.cross(&e1);
    let theta_max = (7.0 * sigma).min(std::f64::consts::PI);
    let (nodes, weights) = gauss_legendre(96);
    let n_phi = 256;
    let d_phi = std::f64::consts::TAU / n_phi as f64;
    let mut acc = 0.0;
    for (x, w) in nodes.iter().zip(weights.iter()) {
        let theta = 0.5 * theta_max * (x + 1.0);
        let (sin_t, cos_t) = theta.sin_cos();
        let ring = sg_eval_cos(cos_t, sigma) * sin_t * w * 0.5 * theta_max * d_phi;
        let mut ring_sum = 0.0;
        for k in 0..n_phi {
            let phi = (k as f64 + 0.5) * d_phi;
            let omega = cos_t * q + sin_t * (phi.cos() * e1 + phi.sin() * e2);
            ring_sum += f(omega);
        }
        acc += ring * ring_sum;
    }
    acc
}

/// One grid point of the factorization comparison.
#[derive(Clone, Copy, Debug)]
pub struct SgValidationRow {
    pub sigma: f64,
    pub view_angle_deg: f64,
    /// Full integral `∫ L · M · cos⁺ · G dω`.
    pub full: f64,
    /// Factored form `v · ∫ L · G dω` with `v = M(q, ω_o)·max(0, q·n)`.
    pub factored: f64,
    pub rel_error: f64,
}

/// Grid sweep result with summary statistics.
#[derive(Clone, Debug)]
pub struct SgValidationReport {
    pub rows: Vec<SgValidationRow>,
    pub max_rel_error: f64,
    pub mean_rel_error: f64,
}

/// Compares the full specular integral against the factored form over a
/// grid of lobe widths and view angles (normal fixed to ẑ, the view in the
/// xz-plane, scalar light `light(ω)`).
pub fn validate_sg_approx(
    m: &MicrofacetM,
    light: impl Fn(Vec3) -> f64 + Copy,
    sigmas: &[f64],
    view_angles_deg: &[f64],
) -> SgValidationReport {
    let n = Vec3::z();
    let mut rows = Vec::with_capacity(sigmas.len() * view_angles_deg.len());
    for &sigma in sigmas {
        for &angle_deg in view_angles_deg {
            let a = angle_deg.to_radians();
            let w_o = Vec3::new(a.sin(), 0.0, a.cos());
            let q = 2.0 * w_o.dot(&n) * n - w_o;
            let full = lobe_integral(q, sigma, |w| {
                light(w) * m.eval(w_o, w, n) * w.dot(&n).max(0.0)
            });
            let v = m.eval(w_o, q, n) * q.dot(&n).max(0.0);
            let factored = v * lobe_integral(q, sigma, light);
            let rel_error = (full - factored).abs() / full.abs().max(1e-300);
            rows.push(SgValidationRow { sigma, view_angle_deg: angle_deg, full, factored, rel_error });
        }
    }
    let max_rel_error = rows.iter().map(|r| r.rel_error).fold(0.0, f64::max);
    let mean_rel_error = rows.iter().map(|r| r.rel_error).sum::<f64>() / rows.len().max(1) as f64;
    SgValidationReport { rows, max_rel_error, mean_rel_error }
}

/// Writes the error curve as CSV (`sigma,view_angle_deg,full,factored,rel_error`).
pub fn write_validation_csv(report: &SgValidationReport, path: &Path) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "sigma,view_angle_deg,full,factored,rel_error")?;
    for r in &report.rows {
        writeln!(
            out,
            "{},{},{:.9e},{:.9e},{:.6e}",
            r.sigma, r.view_angle_deg, r.full, r.factored, r.rel_error
        )?;
    }
    out.flush()?;
    Ok(())
}
