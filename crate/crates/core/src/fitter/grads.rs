//! Hand-derived adjoints of the shading model and the flat parameter
//! layout used by the optimizer.
//!
//! [`shade_backward`] mirrors the forward shading of one Gaussian
//! ([`crate::appearance`]) and pushes a gradient on its output color back
//! to every transfer parameter plus the viewing direction; the caller
//! chains `∂ω_o/∂position` (the normalization Jacobian) to finish the
//! position path. Screen-space gradients flow through
//! [`crate::splatter::rasterize_backward`] and
//! [`crate::splatter::project_backward`] and land in the same
//! [`CloudGrads`] container.
//!
//! Parameters live in a fixed flat layout (per Gaussian: geometry, then
//! transfer) so the optimizer can treat the cloud as one `Vec<f64>`;
//! [`pack_params`]/[`unpack_params`]/[`pack_grads`] define that layout.

use crate::appearance::{luma, ShadeContext, SpecularSource, LIGHT_ORDER};
use crate::scene::{
    GaussianCloud, TransferParams, D_C_LEN, D_M_LEN, SIGMA_MAX, SIGMA_MIN, VIEW_SH_LEN,
};
use crate::sphmath::{sg_grads_cos, sh_basis_grad_into, Dir};
use crate::{sigmoid, softplus, Error, Result, Rgb, Vec3};

/// Gradients of one Gaussian's transfer block. `albedo_view` is `Some`
/// exactly when the source Gaussian carries a view-conditioned albedo.
#[derive(Clone, Debug)]
pub struct TransferGrads {
    pub albedo: Rgb,
    pub d_c: [Rgb; D_C_LEN],
    pub d_m: [f64; D_M_LEN],
    pub rough_raw: f64,
    pub n_base: Vec3,
    pub dn_view: [Vec3; VIEW_SH_LEN],
    pub v_view: [f64; VIEW_SH_LEN],
    pub albedo_view: Option<[Rgb; VIEW_SH_LEN]>,
}

impl TransferGrads {
    pub fn zeros(has_albedo_view: bool) -> TransferGrads {
        TransferGrads {
            albedo: Rgb::zeros(),
            d_c: [Rgb::zeros(); D_C_LEN],
            d_m: [0.0; D_M_LEN],
            rough_raw: 0.0,
            n_base: Vec3::zeros(),
            dn_view: [Vec3::zeros(); VIEW_SH_LEN],
            v_view: [0.0; VIEW_SH_LEN],
            albedo_view: has_albedo_view.then_some([Rgb::zeros(); VIEW_SH_LEN]),
        }
    }

    /// Element-wise accumulation (optional blocks must agree).
    pub fn add(&mut self, other: &TransferGrads) {
        self.albedo += other.albedo;
        for (a, b) in self.d_c.iter_mut().zip(&other.d_c) {
            *a += b;
        }
        for (a, b) in self.d_m.iter_mut().zip(&other.d_m) {
            *a += b;
        }
        self.rough_raw += other.rough_raw;
        self.n_base += other.n_base;
        for (a, b) in self.dn_view.iter_mut().zip(&other.dn_view) {
            *a += b;
        }
        for (a, b) in self.v_view.iter_mut().zip(&other.v_view) {
            *a += b;
        }
        if let (Some(a), Some(b)) = (self.albedo_view.as_mut(), other.albedo_view.as_ref()) {
            for (ai, bi) in a.iter_mut().zip(b) {
                *ai += bi;
            }
        }
    }
}

/// Gradient of a scalar loss with respect to every optimizable parameter
/// of a cloud, index-aligned with `cloud.gaussians`.
#[derive(Clone, Debug)]
pub struct CloudGrads {
    pub d_pos: Vec<Vec3>,
    pub d_quat: Vec<crate::Vec4>,
    pub d_log_scale: Vec<Vec3>,
    pub d_opacity_logit: Vec<f64>,
    pub d_transfer: Vec<TransferGrads>,
}

impl CloudGrads {
    pub fn zeros_like(cloud: &GaussianCloud) -> CloudGrads {
        let n = cloud.gaussians.len();
        CloudGrads {
            d_pos: vec![Vec3::zeros(); n],
            d_quat: vec![crate::Vec4::zeros(); n],
            d_log_scale: vec![Vec3::zeros(); n],
            d_opacity_logit: vec![0.0; n],
            d_transfer: cloud
                .transfer
                .iter()
                .map(|tp| TransferGrads::zeros(tp.albedo_view.is_some()))
                .collect(),
        }
    }

    /// Element-wise accumulation (shapes must match).
    pub fn add(&mut self, other: &CloudGrads) {
        for (a, b) in self.d_pos.iter_mut().zip(&other.d_pos) {
            *a += b;
        }
        for (a, b) in self.d_quat.iter_mut().zip(&other.d_quat) {
            *a += b;
        }
        for (a, b) in self.d_log_scale.iter_mut().zip(&other.d_log_scale) {
            *a += b;
        }
        for (a, b) in self.d_opacity_logit.iter_mut().zip(&other.d_opacity_logit) {
            *a += b;
        }
        for (a, b) in self.d_transfer.iter_mut().zip(&other.d_transfer) {
            a.add(b);
        }
    }

    /// Uniform scaling, e.g. batch averaging.
    pub fn scale(&mut self, s: f64) {
        for v in &mut self.d_pos {
            *v *= s;
        }
        for v in &mut self.d_quat {
            *v *= s;
        }
        for v in &mut self.d_log_scale {
            *v *= s;
        }
        for v in &mut self.d_opacity_logit {
            *v *= s;
        }
        for t in &mut self.d_transfer {
            t.albedo *= s;
            for c in &mut t.d_c {
                *c *= s;
            }
            for m in &mut t.d_m {
                *m *= s;
            }
            t.rough_raw *= s;
            t.n_base *= s;
            for d in &mut t.dn_view {
                *d *= s;
            }
            for v in &mut t.v_view {
                *v *= s;
            }
            if let Some(av) = t.albedo_view.as_mut() {
                for c in av.iter_mut() {
                    *c *= s;
                }
            }
        }
    }
}

/// Pushes a gradient on one Gaussian's shaded color back to its transfer
/// parameters and the viewing direction.
///
/// `d_full` is the upstream gradient on the total color (diffuse +
/// specular); `d_diffuse_extra` applies to the diffuse term only (the
/// negative-color penalty needs that split). Returns the transfer
/// gradients and `∂loss/∂ω_o` as a free 3-vector; contract it with a
/// tangential Jacobian (such as `∂ω_o/∂position`) — its radial component
/// is meaningless and must be projected away by that chain.
pub fn shade_backward(
    tp: &TransferParams,
    ctx: &ShadeContext,
    w_o: Dir,
    d_full: Rgb,
    d_diffuse_extra: Rgb,
) -> (TransferGrads, Vec3) {
    let mut tg = TransferGrads::zeros(tp.albedo_view.is_some());
    let light = ctx.light_sh;
    debug_assert!(light.order() >= LIGHT_ORDER);

    // View basis and its Cartesian gradient at ω_o.
    let mut b = [0.0; VIEW_SH_LEN];
    let mut gradb = [Vec3::zeros(); VIEW_SH_LEN];
    sh_basis_grad_into(w_o, 2, &mut b, &mut gradb);
    // Accumulates ∂loss/∂b_j; folded into d_w_o at the end.
    let mut d_b = [0.0; VIEW_SH_LEN];
    let mut d_w_o = Vec3::zeros();

    // ---- Diffuse: c_d = a(ω_o) ⊙ resp(light; d_c, d_m) ----
    let d_diff = d_full + d_diffuse_extra;
    let mut resp = Rgb::zeros();
    for (i, d_c) in tp.d_c.iter().enumerate() {
        resp += light.rgb(i).component_mul(d_c);
    }
    let mut mono = 0.0;
    for (k, d_m) in tp.d_m.iter().enumerate() {
        mono += luma(light.rgb(D_C_LEN + k)) * d_m;
    }
    resp += Rgb::repeat(mono);

    let albedo = match &tp.albedo_view {
        None => {
            tg.albedo = d_diff.component_mul(&resp);
            tp.albedo
        }
        Some(av) => {
            let mut a = Rgb::zeros();
            let weighted = d_diff.component_mul(&resp);
            let out = tg.albedo_view.as_mut().expect("allocated above");
            for (j, (&bj, avj)) in b.iter().zip(av).enumerate() {
                a += bj * avj;
                out[j] = bj * weighted;
                d_b[j] += avj.dot(&weighted);
            }
            a
        }
    };

    let d_resp = d_diff.component_mul(&albedo);
    for (i, g) in tg.d_c.iter_mut().enumerate() {
        *g = d_resp.component_mul(&light.rgb(i));
    }
    let d_resp_sum = d_resp.x + d_resp.y + d_resp.z;
    for (k, g) in tg.d_m.iter_mut().enumerate() {
        *g = d_resp_sum * luma(light.rgb(D_C_LEN + k));
    }

    // ---- Specular: c_s = v(ω_o) · B(q, σ) ----
    // Forward intermediates.
    let mut logit_v = 0.0;
    for (j, &bj) in b.iter().enumerate() {
        logit_v += bj * tp.v_view[j];
    }
    let v = sigmoid(logit_v);

    let mut u = tp.n_base;
    for (j, &bj) in b.iter().enumerate() {
        u += bj * tp.dn_view[j];
    }
    let u_norm = u.norm();
    let fallback = u_norm < 1e-6;
    let n = if fallback { tp.n_base.normalize() } else { u / u_norm };
    let won = w_o.dot(&n);
    let q_vec = 2.0 * won * n - w_o.as_vec();
    let q = Dir::from_unit(q_vec.normalize());
    let sigma = tp.sigma();

    // Lobe response and its derivatives w.r.t. q (free) and σ.
    let (lobe, d_q_free, d_sigma) = match ctx.specular {
        SpecularSource::Points(pattern) => {
            let mut lobe = Rgb::zeros();
            let mut d_q = Vec3::zeros();
            let mut d_s = 0.0;
            for l in &pattern.lights {
                let (g, dg_dcos, dg_dsigma) = sg_grads_cos(q.dot(&l.dir), sigma);
                lobe += l.intensity * g;
                // Weight of this light in the upstream gradient: v·d_full.
                let w = v * d_full.dot(&l.intensity);
                d_q += w * dg_dcos * l.dir.as_vec();
                d_s += w * dg_dsigma;
            }
            (lobe, d_q, d_s)
        }
        SpecularSource::Env(pf) => {
            let lk = pf.lookup_grad(q, sigma);
            let d_e = v * d_full;
            let d_q = Vec3::new(
                d_e.dot(&lk.d_q[0]),
                d_e.dot(&lk.d_q[1]),
                d_e.dot(&lk.d_q[2]),
            );
            (lk.value, d_q, d_e.dot(&lk.d_sigma))
        }
    };

    // Visibility gate.
    let d_v = d_full.dot(&lobe);
    let d_logit = d_v * v * (1.0 - v);
    for (j, (&bj, g)) in b.iter().zip(tg.v_view.iter_mut()).enumerate() {
        *g = bj * d_logit;
        d_b[j] += tp.v_view[j] * d_logit;
    }

    // Width: σ = min(σ_min + softplus(r), σ_max); flat where the cap binds.
    if SIGMA_MIN + softplus(tp.rough_raw) < SIGMA_MAX {
        tg.rough_raw = d_sigma * sigmoid(tp.rough_raw);
    }

    // Mirror direction q = 2(ω_o·n)n − ω_o: free Jacobians, exact when
    // contracted with on-sphere perturbations of n and ω_o.
    let ndq = n.dot(&d_q_free);
    let d_n = 2.0 * (ndq * w_o.as_vec() + won * d_q_free);
    d_w_o += 2.0 * ndq * n - d_q_free;

    // Normalized residual normal n = u/‖u‖.
    let d_u = if fallback {
        // The residual cancelled the base; the forward pass used the base
        // normal alone, so only its (normalized) direction carries grad.
        let d_nb = d_n - n.dot(&d_n) * n;
        tg.n_base = d_nb / tp.n_base.norm().max(1e-12);
        Vec3::zeros()
    } else {
        (d_n - n.dot(&d_n) * n) / u_norm
    };
    if !fallback {
        tg.n_base = d_u;
        for (j, (&bj, g)) in b.iter().zip(tg.dn_view.iter_mut()).enumerate() {
            *g = bj * d_u;
            d_b[j] += tp.dn_view[j].dot(&d_u);
        }
    }

    // Fold the view-basis sensitivities into the direction gradient.
    for (dbj, gb) in d_b.iter().zip(&gradb) {
        d_w_o += *dbj * gb;
    }

    (tg, d_w_o)
}

/// Chains a free gradient on `ω_o = (cam − pos)/‖cam − pos‖` to the
/// Gaussian position: `∂ω_o/∂pos = −(I − ω_o ω_oᵀ)/r`.
pub fn view_dir_to_pos(d_w_o: Vec3, w_o: Dir, dist: f64) -> Vec3 {
    let radial = w_o.as_vec() * w_o.dot(&d_w_o);
    -(d_w_o - radial) / dist
}

/// Scalars in one Gaussian's flat block.
fn block_len(tp: &TransferParams) -> usize {
    // pos + quat + log_scale + opacity, then the transfer block.
    let geometry = 3 + 4 + 3 + 1;
    let transfer = 3 + 3 * D_C_LEN + D_M_LEN + 1 + 3 + 3 * VIEW_SH_LEN + VIEW_SH_LEN;
    geometry + transfer + if tp.albedo_view.is_some() { 3 * VIEW_SH_LEN } else { 0 }
}

/// Total flat parameter count of a cloud.
pub fn param_count(cloud: &GaussianCloud) -> usize {
    cloud.transfer.iter().map(block_len).sum()
}

fn push_vec3(out: &mut Vec<f64>, v: Vec3) {
    out.extend_from_slice(&[v.x, v.y, v.z]);
}

/// Serializes every optimizable parameter into one flat vector with a
/// fixed per-Gaussian layout (geometry first, then transfer).
pub fn pack_params(cloud: &GaussianCloud) -> Vec<f64> {
    let mut out = Vec::with_capacity(param_count(cloud));
    for (g, tp) in cloud.gaussians.iter().zip(&cloud.transfer) {
        push_vec3(&mut out, g.pos);
        out.extend_from_slice(&[g.quat.x, g.quat.y, g.quat.z, g.quat.w]);
        push_vec3(&mut out, g.log_scale);
        out.push(g.opacity_logit);

        push_vec3(&mut out, tp.albedo);
        for c in &tp.d_c {
            push_vec3(&mut out, *c);
        }
        out.extend_from_slice(&tp.d_m);
        out.push(tp.rough_raw);
        push_vec3(&mut out, tp.n_base);
        for d in &tp.dn_view {
            push_vec3(&mut out, *d);
        }
        out.extend_from_slice(&tp.v_view);
        if let Some(av) = &tp.albedo_view {
            for c in av {
                push_vec3(&mut out, *c);
            }
        }
    }
    out
}

/// Gradients in the same layout as [`pack_params`].
pub fn pack_grads(grads: &CloudGrads) -> Vec<f64> {
    let mut out = Vec::new();
    for i in 0..grads.d_pos.len() {
        push_vec3(&mut out, grads.d_pos[i]);
        let q = grads.d_quat[i];
        out.extend_from_slice(&[q.x, q.y, q.z, q.w]);
        push_vec3(&mut out, grads.d_log_scale[i]);
        out.push(grads.d_opacity_logit[i]);

        let t = &grads.d_transfer[i];
        push_vec3(&mut out, t.albedo);
        for c in &t.d_c {
            push_vec3(&mut out, *c);
        }
        out.extend_from_slice(&t.d_m);
        out.push(t.rough_raw);
        push_vec3(&mut out, t.n_base);
        for d in &t.dn_view {
            push_vec3(&mut out, *d);
        }
        out.extend_from_slice(&t.v_view);
        if let Some(av) = &t.albedo_view {
            for c in av {
                push_vec3(&mut out, *c);
            }
        }
    }
    out
}

struct Reader<'a> {
    data: &'a [f64],
    at: usize,
}

impl<'a> Reader<'a> {
    fn f(&mut self) -> f64 {
        let v = self.data[self.at];
        self.at += 1;
        v
    }

    fn v3(&mut self) -> Vec3 {
        Vec3::new(self.f(), self.f(), self.f())
    }
}

/// Writes a flat parameter vector back into the cloud (inverse of
/// [`pack_params`]); errors on length mismatch.
pub fn unpack_params(cloud: &mut GaussianCloud, params: &[f64]) -> Result<()> {
    let want = param_count(cloud);
    if params.len() != want {
        return Err(Error::InvalidArgument(format!(
            "parameter vector has {} entries, cloud needs {want}",
            params.len()
        )));
    }
    let mut r = Reader { data: params, at: 0 };
    for (g, tp) in cloud.gaussians.iter_mut().zip(&mut cloud.transfer) {
        g.pos = r.v3();
        g.quat = crate::Vec4::new(r.f(), r.f(), r.f(), r.f());
        g.log_scale = r.v3();
        g.opacity_logit = r.f();

        tp.albedo = r.v3();
        for c in &mut tp.d_c {
            *c = r.v3();
        }
        for m in &mut tp.d_m {
            *m = r.f();
        }
        tp.rough_raw = r.f();
        tp.n_base = r.v3();
        for d in &mut tp.dn_view {
            *d = r.v3();
        }
        for v in &mut tp.v_view {
            *v = r.f();
        }
        if let Some(av) = &mut tp.albedo_view {
            for c in av.iter_mut() {
                *c = r.v3();
            }
        }
    }
    Ok(())
}

/// Restores the unit-norm invariants a raw optimizer step breaks:
/// quaternions and base normals are scaled back to length 1. Errors when
/// either collapsed (a sign of divergence, not of a legitimate step).
pub fn renormalize(cloud: &mut GaussianCloud) -> Result<()> {
    for (i, g) in cloud.gaussians.iter_mut().enumerate() {
        let qn = g.quat.norm();
        if !qn.is_finite() || qn < 1e-9 {
            return Err(Error::NonFinite(format!("quaternion of gaussian {i}")));
        }
        g.quat /= qn;
    }
    for (i, tp) in cloud.transfer.iter_mut().enumerate() {
        let nn = tp.n_base.norm();
        if !nn.is_finite() || nn < 1e-9 {
            return Err(Error::NonFinite(format!("base normal of gaussian {i}")));
        }
        tp.n_base /= nn;
    }
    Ok(())
}

/// Zeroes gradients of parameters that are frozen: eye-group positions,
/// base normals and normal residuals when the cloud has eye constraints
/// applied, and every monochrome band when `freeze_d_m` is set.
pub fn zero_frozen(grads: &mut CloudGrads, cloud: &GaussianCloud, freeze_d_m: bool) {
    if cloud.eyes_frozen {
        for (i, g) in cloud.gaussians.iter().enumerate() {
            if g.group.is_eye() {
                grads.d_pos[i] = Vec3::zeros();
                grads.d_transfer[i].n_base = Vec3::zeros();
                grads.d_transfer[i].dn_view = [Vec3::zeros(); VIEW_SH_LEN];
            }
        }
    }
    if freeze_d_m {
        for t in &mut grads.d_transfer {
            t.d_m = [0.0; D_M_LEN];
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::appearance::{effective_albedo, shade_specular, transfer_response};
    use crate::lighting::{blob_env, prefilter_env, LightPattern, PointLight};
    use crate::scene::presets::sphere_scene;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_dir(rng: &mut ChaCha8Rng) -> Dir {
        loop {
            let v = Vec3::new(
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            );
            if v.norm() > 0.1 && v.norm() < 1.0 {
                return Dir::new(v).unwrap();
            }
        }
    }

    fn random_transfer(rng: &mut ChaCha8Rng, with_eye_albedo: bool) -> TransferParams {
        let mut tp = TransferParams::neutral();
        tp.albedo = Rgb::new(rng.gen_range(0.2..0.9), rng.gen_range(0.2..0.9), rng.gen_range(0.2..0.9));
        for c in &mut tp.d_c {
            *c = Rgb::new(
                rng.gen_range(-0.3..0.6),
                rng.gen_range(-0.3..0.6),
                rng.gen_range(-0.3..0.6),
            );
        }
        for m in &mut tp.d_m {
            *m = rng.gen_range(-0.2..0.3);
        }
        tp.rough_raw = TransferParams::rough_raw_for_sigma(rng.gen_range(0.08..0.3));
        tp.n_base = random_dir(rng).as_vec();
        for d in &mut tp.dn_view {
            *d = Vec3::new(
                rng.gen_range(-0.1..0.1),
                rng.gen_range(-0.1..0.1),
                rng.gen_range(-0.1..0.1),
            );
        }
        for v in &mut tp.v_view {
            *v = rng.gen_range(-1.5..1.5);
        }
        if with_eye_albedo {
            let mut av = [Rgb::zeros(); VIEW_SH_LEN];
            for c in &mut av {
                *c = Rgb::new(
                    rng.gen_range(-0.4..0.8),
                    rng.gen_range(-0.4..0.8),
                    rng.gen_range(-0.4..0.8),
                );
            }
            av[0] += Rgb::repeat(1.0);
            tp.albedo_view = Some(av);
        }
        tp
    }

    fn random_pattern(rng: &mut ChaCha8Rng, n: usize) -> LightPattern {
        LightPattern::new(
            (0..n)
                .map(|_| PointLight {
                    dir: random_dir(rng),
                    intensity: Rgb::new(
                        rng.gen_range(0.2..2.0),
                        rng.gen_range(0.2..2.0),
                        rng.gen_range(0.2..2.0),
                    ),
                })
                .collect(),
        )
    }

    /// Scalar objective: fixed random co-vectors against the full and
    /// diffuse colors, matching `shade_backward`'s two upstream slots.
    fn objective(tp: &TransferParams, ctx: &ShadeContext, w_o: Dir, wf: Rgb, wd: Rgb) -> f64 {
        let diffuse = effective_albedo(tp, w_o).component_mul(&transfer_response(tp, ctx.light_sh));
        let full = diffuse + shade_specular(tp, ctx, w_o);
        wf.dot(&full) + wd.dot(&diffuse)
    }

    /// Central finite difference over one scalar slot of TransferParams.
    fn fd(
        tp: &TransferParams,
        ctx: &ShadeContext,
        w_o: Dir,
        wf: Rgb,
        wd: Rgb,
        write: impl Fn(&mut TransferParams, f64),
        base: f64,
    ) -> f64 {
        let eps = 1e-6;
        let mut hi = tp.clone();
        write(&mut hi, base + eps);
        let mut lo = tp.clone();
        write(&mut lo, base - eps);
        (objective(&hi, ctx, w_o, wf, wd) - objective(&lo, ctx, w_o, wf, wd)) / (2.0 * eps)
    }

    fn check(label: &str, analytic: f64, numeric: f64) {
        let scale = analytic.abs().max(numeric.abs()).max(1e-6);
        assert!(
            (analytic - numeric).abs() / scale < 2e-4,
            "{label}: analytic {analytic} vs fd {numeric}"
        );
    }

    fn run_fd_sweep(ctx: &ShadeContext, tp: &TransferParams, w_o: Dir, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let wf = Rgb::new(rng.gen_range(0.2..1.0), rng.gen_range(0.2..1.0), rng.gen_range(0.2..1.0));
        let wd = Rgb::new(rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5));
        let (tg, d_w_o) = shade_backward(tp, ctx, w_o, wf, wd);

        for ch in 0..3 {
            check(
                "albedo",
                tg.albedo[ch],
                fd(tp, ctx, w_o, wf, wd, |t, v| t.albedo[ch] = v, tp.albedo[ch]),
            );
        }
        for i in 0..D_C_LEN {
            for ch in 0..3 {
                check(
                    "d_c",
                    tg.d_c[i][ch],
                    fd(tp, ctx, w_o, wf, wd, |t, v| t.d_c[i][ch] = v, tp.d_c[i][ch]),
                );
            }
        }
        for k in 0..D_M_LEN {
            check(
                "d_m",
                tg.d_m[k],
                fd(tp, ctx, w_o, wf, wd, |t, v| t.d_m[k] = v, tp.d_m[k]),
            );
        }
        check(
            "rough_raw",
            tg.rough_raw,
            fd(tp, ctx, w_o, wf, wd, |t, v| t.rough_raw = v, tp.rough_raw),
        );
        for ax in 0..3 {
            check(
                "n_base",
                tg.n_base[ax],
                fd(tp, ctx, w_o, wf, wd, |t, v| t.n_base[ax] = v, tp.n_base[ax]),
            );
        }
        for j in 0..VIEW_SH_LEN {
            for ax in 0..3 {
                check(
                    "dn_view",
                    tg.dn_view[j][ax],
                    fd(tp, ctx, w_o, wf, wd, |t, v| t.dn_view[j][ax] = v, tp.dn_view[j][ax]),
                );
            }
            check(
                "v_view",
                tg.v_view[j],
                fd(tp, ctx, w_o, wf, wd, |t, v| t.v_view[j] = v, tp.v_view[j]),
            );
        }
        if let Some(av) = &tp.albedo_view {
            let tav = tg.albedo_view.as_ref().expect("grads carry albedo_view");
            for j in 0..VIEW_SH_LEN {
                for ch in 0..3 {
                    check(
                        "albedo_view",
                        tav[j][ch],
                        fd(
                            tp,
                            ctx,
                            w_o,
                            wf,
                            wd,
                            |t, v| t.albedo_view.as_mut().unwrap()[j][ch] = v,
                            av[j][ch],
                        ),
                    );
                }
            }
        }

        // Viewing-direction gradient along two tangents of the sphere.
        let helper = if w_o.x.abs() < 0.9 { Vec3::x() } else { Vec3::y() };
        let t1 = w_o.cross(&helper).normalize();
        let t2 = w_o.cross(&t1);
        for t in [t1, t2] {
            let eps = 1e-6;
            let hi = Dir::new(w_o.as_vec() + eps * t).unwrap();
            let lo = Dir::new(w_o.as_vec() - eps * t).unwrap();
            let numeric = (objective(tp, ctx, hi, wf, wd) - objective(tp, ctx, lo, wf, wd))
                / (2.0 * eps);
            check("w_o tangent", d_w_o.dot(&t), numeric);
        }
    }

    #[test]
    fn point_light_shading_gradients_match_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let pattern = random_pattern(&mut rng, 3);
        let sh = pattern.to_sh(LIGHT_ORDER);
        let cam = Vec3::new(0.3, -0.2, 3.0);
        let ctx = ShadeContext::points(&sh, &pattern, cam).unwrap();
        let tp = random_transfer(&mut rng, false);
        let w_o = random_dir(&mut rng);
        run_fd_sweep(&ctx, &tp, w_o, 1001);
    }

    #[test]
    fn eye_albedo_shading_gradients_match_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let pattern = random_pattern(&mut rng, 2);
        let sh = pattern.to_sh(LIGHT_ORDER);
        let ctx = ShadeContext::points(&sh, &pattern, Vec3::new(0.0, 0.0, 4.0)).unwrap();
        let tp = random_transfer(&mut rng, true);
        let w_o = random_dir(&mut rng);
        run_fd_sweep(&ctx, &tp, w_o, 1002);
    }

    #[test]
    fn env_light_shading_gradients_match_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(43);
        let env = blob_env(64, 3, 77).unwrap();
        let pf = prefilter_env(&env).unwrap();
        let sh = crate::lighting::env_to_sh(&env, LIGHT_ORDER);
        let ctx = ShadeContext::env(&sh, &pf, Vec3::new(0.1, 0.4, 3.5)).unwrap();
        let tp = random_transfer(&mut rng, false);
        let w_o = random_dir(&mut rng);
        run_fd_sweep(&ctx, &tp, w_o, 1003);
    }

    #[test]
    fn parameter_vector_round_trips() {
        let mut cloud = sphere_scene(17, 5);
        // Give one Gaussian a view-conditioned albedo so the optional block
        // participates in the layout.
        cloud.transfer[3].albedo_view = Some([Rgb::repeat(0.4); VIEW_SH_LEN]);
        let params = pack_params(&cloud);
        assert_eq!(params.len(), param_count(&cloud));

        let mut other = sphere_scene(17, 99);
        other.transfer[3].albedo_view = Some([Rgb::zeros(); VIEW_SH_LEN]);
        unpack_params(&mut other, &params).unwrap();
        assert_eq!(pack_params(&other), params);

        // Wrong length is rejected.
        assert!(unpack_params(&mut other, &params[1..]).is_err());
    }

    #[test]
    fn renormalize_restores_unit_invariants() {
        let mut cloud = sphere_scene(6, 8);
        cloud.gaussians[2].quat *= 1.3;
        cloud.transfer[4].n_base *= 0.2;
        renormalize(&mut cloud).unwrap();
        assert!((cloud.gaussians[2].quat.norm() - 1.0).abs() < 1e-12);
        assert!((cloud.transfer[4].n_base.norm() - 1.0).abs() < 1e-12);

        cloud.transfer[1].n_base = Vec3::zeros();
        assert!(renormalize(&mut cloud).is_err());
    }

    #[test]
    fn frozen_blocks_get_zero_gradients() {
        let mut cloud = sphere_scene(5, 3);
        cloud.gaussians[1].group = crate::scene::Group::LeftEye;
        cloud.eyes_frozen = true;
        let mut grads = CloudGrads::zeros_like(&cloud);
        for i in 0..5 {
            grads.d_pos[i] = Vec3::repeat(1.0);
            grads.d_transfer[i].n_base = Vec3::repeat(1.0);
            grads.d_transfer[i].dn_view = [Vec3::repeat(1.0); VIEW_SH_LEN];
            grads.d_transfer[i].d_m = [1.0; D_M_LEN];
        }
        zero_frozen(&mut grads, &cloud, true);
        assert_eq!(grads.d_pos[1], Vec3::zeros());
        assert_eq!(grads.d_transfer[1].n_base, Vec3::zeros());
        assert_eq!(grads.d_transfer[1].dn_view[4], Vec3::zeros());
        // Head gaussians keep their geometry gradients…
        assert_eq!(grads.d_pos[0], Vec3::repeat(1.0));
        // …but the monochrome-band freeze applies everywhere.
        assert_eq!(grads.d_transfer[0].d_m[10], 0.0);
    }

    #[test]
    fn view_dir_chain_matches_position_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(44);
        let pattern = random_pattern(&mut rng, 3);
        let sh = pattern.to_sh(LIGHT_ORDER);
        let cam = Vec3::new(0.3, -0.2, 3.0);
        let ctx = ShadeContext::points(&sh, &pattern, cam).unwrap();
        let tp = random_transfer(&mut rng, false);
        let pos = Vec3::new(0.2, 0.5, -0.4);
        let wf = Rgb::new(0.7, 0.4, 0.9);
        let wd = Rgb::new(0.1, -0.2, 0.3);

        let w_o = Dir::new(cam - pos).unwrap();
        let (_, d_w_o) = shade_backward(&tp, &ctx, w_o, wf, wd);
        let d_pos = view_dir_to_pos(d_w_o, w_o, (cam - pos).norm());

        let eps = 1e-6;
        for ax in 0..3 {
            let mut hi = pos;
            hi[ax] += eps;
            let mut lo = pos;
            lo[ax] -= eps;
            let f_hi = objective(&tp, &ctx, Dir::new(cam - hi).unwrap(), wf, wd);
            let f_lo = objective(&tp, &ctx, Dir::new(cam - lo).unwrap(), wf, wd);
            check("pos axis", d_pos[ax], (f_hi - f_lo) / (2.0 * eps));
        }
    }
}
