//! Acceptance suite: one test and one printed PASS/FAIL line per release
//! criterion. Run with `--nocapture` to see every line; a failed criterion
//! also fails its test.
//!
//! Criteria covered here:
//!  1. SH orthonormality and dot-product/quadrature equivalence
//!  2. SG normalization constant and integral stability
//!  3. EWA projected covariance vs Monte-Carlo oracle
//!  4. Tile rasterizer ≡ naive rasterizer, and ≥10× faster at scale
//!  5. Prefiltered environment lookup vs brute-force convolution
//!  6. Light linearity of rendered images
//!  7. Gradient checks for every optimizable parameter class
//!  8. Synthetic OLAT recovery experiment
//!  9. Mono-SH shadow-sharpness ablation
//! 10. Light-pattern-count robustness
//! 11. Specular visibility approximation error bound

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rgsplat::lighting::{blob_env, prefilter_env, sg_convolve_dense};
use rgsplat::scene::{presets::random_cloud, Gaussian, Group};
use rgsplat::sphmath::{
    gauss_legendre, num_coeffs, sg_eval_cos, sg_norm_constant, sh_basis_into, sphere_integrate,
    Dir, SphereRule,
};
use rgsplat::splatter::{
    project_gaussian, rasterize, rasterize_naive, sort_splats, Camera, Splat, COV2D_LOW_PASS,
};
use rgsplat::{Mat2, Mat3, Rgb, Vec2, Vec3, Vec4};

fn report(criterion: u32, pass: bool, detail: &str) {
    let verdict = if pass { "PASS" } else { "FAIL" };
    println!("criterion {criterion:2}: {verdict} — {detail}");
    assert!(pass, "criterion {criterion} failed: {detail}");
}

fn random_unit(rng: &mut impl Rng) -> Vec3 {
    loop {
        let v = Vec3::new(
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
        );
        let n = v.norm();
        if n > 0.1 && n < 1.0 {
            return v / n;
        }
    }
}

/// Criterion 1: the order-8 real SH basis is orthonormal under spherical
/// quadrature, and band-limited inner products equal coefficient dot
/// products, both within 1e-5 over 100 random pairs, in under 10 s.
#[test]
fn criterion_01_sh_orthonormality_and_dot_equivalence() {
    let start = Instant::now();
    let rule = SphereRule::standard();
    let n = num_coeffs(8);

    let mut gram = vec![0.0; n * n];
    let mut basis = vec![0.0; n];
    for &(d, w) in &rule.nodes {
        sh_basis_into(d, 8, &mut basis);
        for i in 0..n {
            let bw = basis[i] * w;
            for j in 0..n {
                gram[i * n + j] += bw * basis[j];
            }
        }
    }
    let mut gram_err: f64 = 0.0;
    for i in 0..n {
        for j in 0..n {
            let want = if i == j { 1.0 } else { 0.0 };
            gram_err = gram_err.max((gram[i * n + j] - want).abs());
        }
    }

    // Parseval on random band-limited pairs: ∫ f·g dω = Σ aᵢbᵢ.
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut pair_err: f64 = 0.0;
    for _ in 0..100 {
        let a: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let dot: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
        let quad = sphere_integrate(&rule, |d| {
            sh_basis_into(d, 8, &mut basis);
            let f: f64 = basis.iter().zip(&a).map(|(y, c)| y * c).sum();
            let g: f64 = basis.iter().zip(&b).map(|(y, c)| y * c).sum();
            f * g
        });
        pair_err = pair_err.max((quad - dot).abs());
    }

    let secs = start.elapsed().as_secs_f64();
    let pass = gram_err <= 1e-5 && pair_err <= 1e-5 && secs < 10.0;
    report(
        1,
        pass,
        &format!(
            "SH gram error {gram_err:.2e}, dot-vs-quadrature error {pair_err:.2e} \
             over 100 pairs in {secs:.1}s (bounds 1e-5, 10s)"
        ),
    );
}

/// Criterion 2: the SG peak value equals the normalization constant to
/// 1e-9, and its sphere integral is stable to 0.1% under quadrature
/// refinement.
#[test]
fn criterion_02_sg_constant_and_integral_stability() {
    // 2π ∫ G(cos θ) sin θ dθ over the support, with n Gauss–Legendre
    // nodes in θ.
    let integral = |sigma: f64, n: usize| {
        let upper = (10.0 * sigma).min(std::f64::consts::PI);
        let (nodes, weights) = gauss_legendre(n);
        let mut acc = 0.0;
        for (x, w) in nodes.iter().zip(&weights) {
            let theta = 0.5 * upper * (x + 1.0);
            acc += w * 0.5 * upper * sg_eval_cos(theta.cos(), sigma) * theta.sin();
        }
        2.0 * std::f64::consts::PI * acc
    };

    let mut worst_peak: f64 = 0.0;
    let mut worst_drift: f64 = 0.0;
    let mut summary = String::new();
    for &sigma in &[0.02, 0.1, 0.5] {
        let c = sg_norm_constant(sigma);
        worst_peak = worst_peak.max((sg_eval_cos(1.0, sigma) - c).abs());
        let coarse = integral(sigma, 64);
        let fine = integral(sigma, 128);
        worst_drift = worst_drift.max((fine - coarse).abs() / fine.abs());
        summary.push_str(&format!("σ={sigma}: C={c:.6}, ∫={fine:.6}; "));
    }
    let pass = worst_peak <= 1e-9 && worst_drift <= 1e-3;
    report(
        2,
        pass,
        &format!(
            "{summary}peak-vs-constant error {worst_peak:.1e} (bound 1e-9), \
             refinement drift {worst_drift:.1e} (bound 1e-3)"
        ),
    );
}

fn gauss_sample(rng: &mut impl Rng) -> f64 {
    let u1: f64 = rng.gen_range(1e-12..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Criterion 3: for 20 random Gaussians, the EWA projected covariance
/// matches the empirical covariance of 10⁶ perspective-projected samples
/// within 2% Frobenius relative error, in under 30 s.
#[test]
fn criterion_03_ewa_projection_matches_monte_carlo() {
    let start = Instant::now();
    let cam = Camera::new(400.0, 400.0, 256.0, 256.0, 512, 512, Mat3::identity(), Vec3::zeros())
        .unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let mut worst: f64 = 0.0;
    for trial in 0..20 {
        let g = Gaussian {
            pos: Vec3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(7.0..12.0)),
            quat: Vec4::new(
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            ),
            log_scale: Vec3::new(
                rng.gen_range(0.02f64..0.15).ln(),
                rng.gen_range(0.02f64..0.15).ln(),
                rng.gen_range(0.02f64..0.15).ln(),
            ),
            opacity_logit: 0.0,
            group: Group::Head,
        };
        let splat = project_gaussian(&g, Rgb::zeros(), &cam).expect("gaussian in frustum");
        let predicted = splat.cov2d - Mat2::identity() * COV2D_LOW_PASS;

        let r = g.rotation();
        let s = g.scale();
        let n = 1_000_000;
        let mut mean = Vec2::zeros();
        let mut m2 = Mat2::zeros();
        let mut pts = Vec::with_capacity(n);
        for _ in 0..n {
            let z = Vec3::new(gauss_sample(&mut rng), gauss_sample(&mut rng), gauss_sample(&mut rng));
            let x = g.pos + r * Vec3::new(z.x * s.x, z.y * s.y, z.z * s.z);
            let t = cam.rotation * x + cam.translation;
            let p = Vec2::new(cam.cx + cam.fx * t.x / t.z, cam.cy + cam.fy * t.y / t.z);
            mean += p;
            pts.push(p);
        }
        mean /= n as f64;
        for p in pts {
            let d = p - mean;
            m2 += d * d.transpose();
        }
        m2 /= n as f64 - 1.0;

        let rel = (m2 - predicted).norm() / predicted.norm();
        worst = worst.max(rel);
        assert!(rel < 0.02, "trial {trial}: relative error {rel:.4}");
    }
    let secs = start.elapsed().as_secs_f64();
    let pass = worst < 0.02 && secs < 30.0;
    report(
        3,
        pass,
        &format!(
            "worst covariance error {:.2}% over 20 Gaussians × 10⁶ samples \
             in {secs:.1}s (bounds 2%, 30s)",
            100.0 * worst
        ),
    );
}

fn colored_splats(cloud_seed: u64, cam: &Camera) -> Vec<Splat> {
    let cloud = random_cloud(200, cloud_seed);
    let mut rng = ChaCha8Rng::seed_from_u64(cloud_seed ^ 0xabcd);
    let splats: Vec<Splat> = cloud
        .gaussians
        .iter()
        .enumerate()
        .filter_map(|(i, g)| {
            let c = Rgb::new(rng.gen(), rng.gen(), rng.gen());
            project_gaussian(g, c, cam).map(|mut s| {
                s.index = i;
                s
            })
        })
        .collect();
    sort_splats(splats).unwrap()
}

/// A dense cloud of small splats for the rasterizer benchmark.
fn benchmark_splats(n: usize, cam: &Camera, seed: u64) -> Vec<Splat> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gaussians: Vec<Gaussian> = (0..n)
        .map(|_| Gaussian {
            pos: Vec3::new(
                rng.gen_range(-1.4..1.4),
                rng.gen_range(-1.4..1.4),
                rng.gen_range(-1.0..1.0),
            ),
            quat: Vec4::new(1.0, 0.0, 0.0, 0.0),
            log_scale: Vec3::repeat(rng.gen_range(0.006f64..0.012).ln()),
            opacity_logit: rng.gen_range(1.0..2.5),
            group: Group::Head,
        })
        .collect();
    let splats: Vec<Splat> = gaussians
        .iter()
        .enumerate()
        .filter_map(|(i, g)| {
            let c = Rgb::new(rng.gen(), rng.gen(), rng.gen());
            project_gaussian(g, c, cam).map(|mut s| {
                s.index = i;
                s
            })
        })
        .collect();
    sort_splats(splats).unwrap()
}

/// Criterion 4: the tiled rasterizer matches the naive one within 1e-5
/// per channel on a 200-Gaussian 256×256 scene, and is at least 10×
/// faster on 100k Gaussians at 512×512.
#[test]
fn criterion_04_tile_rasterizer_matches_naive_and_is_fast() {
    let cam = Camera::look_at(Vec3::new(0.0, 0.2, -4.0), Vec3::zeros(), Vec3::y(), 220.0, 256, 256)
        .unwrap();
    let splats = colored_splats(404, &cam);
    let bg = Rgb::new(0.02, 0.02, 0.05);
    let (tile_img, _) = rasterize(&splats, 256, 256, bg).unwrap();
    let (naive_img, _) = rasterize_naive(&splats, 256, 256, bg).unwrap();
    let max_diff = tile_img.max_abs_diff(&naive_img);

    let bench_cam =
        Camera::look_at(Vec3::new(0.0, 0.0, -4.0), Vec3::zeros(), Vec3::y(), 900.0, 512, 512)
            .unwrap();
    let bench = benchmark_splats(100_000, &bench_cam, 405);
    // Warm-up pass so allocator state doesn't favor either path.
    let _ = rasterize(&bench[..1000], 512, 512, bg).unwrap();

    let t0 = Instant::now();
    let (tile_big, _) = rasterize(&bench, 512, 512, bg).unwrap();
    let tile_secs = t0.elapsed().as_secs_f64();
    let t1 = Instant::now();
    let (naive_big, _) = rasterize_naive(&bench, 512, 512, bg).unwrap();
    let naive_secs = t1.elapsed().as_secs_f64();
    assert_eq!(tile_big.pixels(), naive_big.pixels(), "paths diverged at scale");

    let speedup = naive_secs / tile_secs;
    let pass = max_diff <= 1e-5 && speedup >= 10.0;
    report(
        4,
        pass,
        &format!(
            "tile-vs-naive max diff {max_diff:.1e} at 256² (bound 1e-5); \
             100k splats at 512²: tile {tile_secs:.2}s vs naive {naive_secs:.2}s, \
             {speedup:.1}× (bound 10×)"
        ),
    );
}

/// Criterion 5: prefiltered environment lookups match brute-force
/// spherical convolution within 2% relative error over 100 random
/// (direction, σ) queries on two HDR test environments, within 60 s
/// (excluding prefiltering).
#[test]
fn criterion_05_prefiltered_lookup_matches_brute_force() {
    let envs = [blob_env(128, 3, 501).unwrap(), blob_env(128, 4, 502).unwrap()];
    let pyramids: Vec<_> = envs.iter().map(|e| prefilter_env(e).unwrap()).collect();

    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(503);
    let mut worst: f64 = 0.0;
    for k in 0..100 {
        let env = &envs[k % 2];
        let pyr = &pyramids[k % 2];
        let q = Dir::new(random_unit(&mut rng)).unwrap();
        let sigma = 0.02 * 50f64.powf(rng.gen_range(0.0..1.0));
        let got = pyr.lookup(q, sigma);
        let want = sg_convolve_dense(env, q, sigma);
        let rel = (got - want).norm() / want.norm();
        worst = worst.max(rel);
    }
    let secs = start.elapsed().as_secs_f64();
    let pass = worst <= 0.02 && secs < 60.0;
    report(
        5,
        pass,
        &format!(
            "worst lookup error {:.2}% over 100 (direction, σ) queries on two \
             environments in {secs:.1}s (bounds 2%, 60s)",
            100.0 * worst
        ),
    );
}

/// Criterion 6 — relighting linearity: rendering under the union of two
/// light patterns equals the sum of the individual renders minus the
/// double-counted background, within 1e-4 per pixel, over 10 random pairs.
#[test]
fn criterion_06_rendering_is_linear_in_light() {
    use rgsplat::appearance::{render, ShadeContext, LIGHT_ORDER};
    use rgsplat::lighting::{LightPattern, PointLight};
    use rgsplat::scene::presets::sphere_scene;

    let cloud = sphere_scene(150, 600);
    let cam = Camera::look_at(
        Vec3::new(0.6, -0.4, -3.8),
        Vec3::zeros(),
        Vec3::new(0.0, 1.0, 0.0),
        110.0,
        96,
        96,
    )
    .unwrap();
    let background = Rgb::new(0.20, 0.25, 0.30);
    let mut rng = ChaCha8Rng::seed_from_u64(601);
    let random_pattern = |rng: &mut ChaCha8Rng| {
        let lights = (0..3)
            .map(|_| PointLight {
                dir: Dir::from_unit(random_unit(rng)),
                intensity: Rgb::new(
                    rng.gen_range(0.1..1.5),
                    rng.gen_range(0.1..1.5),
                    rng.gen_range(0.1..1.5),
                ),
            })
            .collect();
        LightPattern::new(lights)
    };

    let mut worst = 0.0f64;
    for _ in 0..10 {
        let a = random_pattern(&mut rng);
        let b = random_pattern(&mut rng);
        let mut union_lights = a.lights.clone();
        union_lights.extend(b.lights.iter().cloned());
        let union = LightPattern::new(union_lights);

        let render_pattern = |p: &LightPattern| {
            let sh = p.to_sh(LIGHT_ORDER);
            let ctx = ShadeContext::points(&sh, p, cam.center()).unwrap();
            render(&cloud, &ctx, &cam, background).unwrap()
        };
        let (img_a, alpha, _) = render_pattern(&a);
        let (img_b, _, _) = render_pattern(&b);
        let (img_ab, _, _) = render_pattern(&union);

        // Each individual render adds the background once, so the sum
        // counts it twice: subtract background × transmittance.
        for (iy, ix) in (0..cam.height).flat_map(|y| (0..cam.width).map(move |x| (y, x))) {
            let t_end = 1.0 - alpha.get(ix, iy);
            let want = img_a.get(ix, iy) + img_b.get(ix, iy) - background * t_end;
            let diff = (img_ab.get(ix, iy) - want).abs().max();
            worst = worst.max(diff);
        }
    }
    report(
        6,
        worst <= 1e-4,
        &format!("worst per-pixel deviation {worst:.2e} over 10 pattern pairs (bound 1e-4)"),
    );
}

/// Criterion 11 — specular factorization: the full microfacet integral and
/// the factored lobe form agree within 5% for narrow lobes near normal
/// incidence; the full error curve is archived as a CSV artifact.
#[test]
fn criterion_11_specular_factorization_error_is_bounded_and_archived() {
    use rgsplat::appearance::validate::{
        validate_sg_approx, write_validation_csv, MicrofacetM,
    };

    let light = |w: Vec3| {
        let u = Vec3::new(0.25, 0.35, 0.9).normalize();
        1.0 + 0.8 * w.dot(&u)
    };
    let sigmas = [0.02, 0.05, 0.1, 0.2, 0.4, 0.8];
    let angles = [0.0, 10.0, 20.0, 30.0, 45.0, 60.0, 75.0];
    let report_rows = validate_sg_approx(&MicrofacetM::smooth(), light, &sigmas, &angles);

    let tight = report_rows
        .rows
        .iter()
        .filter(|r| r.sigma <= 0.05 && r.view_angle_deg <= 20.0)
        .map(|r| r.rel_error)
        .fold(0.0f64, f64::max);

    let path = std::path::Path::new(env!("CARGO_TARGET_TMPDIR")).join("sg_factorization_error.csv");
    write_validation_csv(&report_rows, &path).unwrap();
    let archived = path.exists();

    report(
        11,
        tight <= 0.05 && archived,
        &format!(
            "narrow-lobe near-normal error {:.2e} (bound 5e-2), grid max {:.1}% at σ≤{}, \
             curve archived to {}",
            tight,
            100.0 * report_rows.max_rel_error,
            sigmas.last().unwrap(),
            path.display()
        ),
    );
}

// Criteria 7–10 exercise the fitting layer and are added alongside it.
