//! Numerical quadrature on the sphere and related point sets.

use std::f64::consts::PI;

use super::Dir;
use crate::{Rgb, Vec3};

/// Gauss–Legendre nodes and weights on `[-1, 1]`.
///
/// Nodes ascend; computed by Newton iteration on the Legendre recurrence,
/// accurate to ~1e-15 for the orders used here.
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(n >= 1, "need at least one node");
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    for i in 0..n {
        // Tricomi-style initial guess for the i-th root (descending order).
        let mut x = (PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            // Evaluate P_n(x) and P_n'(x) via the three-term recurrence.
            let mut p0 = 1.0;
            let mut p1 = x;
            for k in 2..=n {
                let kf = k as f64;
                let p2 = ((2.0 * kf - 1.0) * x * p1 - (kf - 1.0) * p0) / kf;
                p0 = p1;
                p1 = p2;
            }
            let p = p1;
            dp = n as f64 * (x * p1 - p0) / (x * x - 1.0);
            let dx = p / dp;
            x -= dx;
            if dx.abs() < 1e-15 {
                break;
            }
        }
        nodes[n - 1 - i] = x;
        weights[n - 1 - i] = 2.0 / ((1.0 - x * x) * dp * dp);
    }
    (nodes, weights)
}

/// A quadrature rule on S²: unit directions with steradian weights.
#[derive(Clone, Debug)]
pub struct SphereRule {
    pub nodes: Vec<(Dir, f64)>,
    pub name: String,
}

impl SphereRule {
    /// Product rule: Gauss–Legendre in cos θ × uniform in φ.
    ///
    /// Exact for spherical polynomials up to degree `min(2·n_theta−1, n_phi−1)`;
    /// weights sum to 4π to machine precision.
    pub fn product(n_theta: usize, n_phi: usize) -> SphereRule {
        let (ct, wt) = gauss_legendre(n_theta);
        let wphi = 2.0 * PI / n_phi as f64;
        let mut nodes = Vec::with_capacity(n_theta * n_phi);
        for (z, w) in ct.iter().zip(&wt) {
            let sin_theta = (1.0 - z * z).max(0.0).sqrt();
            for j in 0..n_phi {
                let phi = 2.0 * PI * (j as f64 + 0.5) / n_phi as f64;
                let d = Vec3::new(sin_theta * phi.cos(), sin_theta * phi.sin(), *z);
                nodes.push((Dir::from_unit(d.normalize()), w * wphi));
            }
        }
        SphereRule { nodes, name: format!("product-gl{n_theta}x{n_phi}") }
    }

    /// The workhorse rule used by the oracle tests: 128 × 256 product grid.
    pub fn standard() -> SphereRule {
        SphereRule::product(128, 256)
    }

    pub fn total_weight(&self) -> f64 {
        self.nodes.iter().map(|(_, w)| w).sum()
    }
}

/// Weighted sum of `f` over the rule's nodes.
pub fn sphere_integrate(rule: &SphereRule, mut f: impl FnMut(Dir) -> f64) -> f64 {
    rule.nodes.iter().map(|&(d, w)| w * f(d)).sum()
}

/// RGB-valued counterpart of [`sphere_integrate`].
pub fn sphere_integrate_rgb(rule: &SphereRule, mut f: impl FnMut(Dir) -> Rgb) -> Rgb {
    let mut acc = Rgb::zeros();
    for &(d, w) in &rule.nodes {
        acc += w * f(d);
    }
    acc
}

/// `n` near-uniform directions from the Fibonacci (golden-angle) spiral.
pub fn fibonacci_sphere(n: usize) -> Vec<Dir> {
    let golden_angle = PI * (3.0 - 5.0f64.sqrt());
    (0..n)
        .map(|i| {
            let z = 1.0 - 2.0 * (i as f64 + 0.5) / n as f64;
            let r = (1.0 - z * z).max(0.0).sqrt();
            let phi = golden_angle * i as f64;
            Dir::from_unit(Vec3::new(r * phi.cos(), r * phi.sin(), z).normalize())
        })
        .collect()
}
