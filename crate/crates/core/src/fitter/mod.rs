//! Inverse rendering: recovers Gaussian-cloud parameters from one-light-
//! at-a-time (OLAT) image sets by adaptive gradient descent on an
//! L1 + D-SSIM reconstruction loss with range regularizers.
//!
//! The pieces:
//!
//! * [`synth_dataset`] renders a reference cloud under an OLAT or grouped
//!   light rig from cameras on a view sphere — the ground truth of the
//!   recovery experiments (plus [`save_dataset`]/[`load_dataset`] for the
//!   on-disk form: PFM images and a JSON manifest).
//! * [`loss::total_loss`] evaluates the objective and its analytic
//!   gradient for a batch of frames; every adjoint is verified against
//!   central finite differences.
//! * [`fit`] runs Adam over the flat parameter vector, deterministic
//!   under a fixed seed, with optional checkpointing and divergence
//!   recovery.
//! * [`metrics`] reports PSNR/SSIM (optionally masked) for evaluation.

pub mod adam;
pub mod grads;
pub mod loss;
pub mod ssim;

use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::appearance::{render, ShadeContext, LIGHT_ORDER};
use crate::image::{read_pfm, write_pfm, ImageGray, ImageRgb};
use crate::lighting::{grouped_rig, olat_rig, LightPattern, PointLight};
use crate::scene::{save_scene, GaussianCloud};
use crate::sphmath::{fibonacci_sphere, Dir};
use crate::splatter::Camera;
use crate::{Error, Result, Rgb, Vec3};

pub use grads::{pack_params, unpack_params, CloudGrads};
pub use loss::{loss_rec, reg_eye, reg_negcolor, reg_scale, total_loss, LossBreakdown};
pub use ssim::{ssim, ssim_masked};

/// One captured (here: synthesized) frame — an image of the scene under
/// one light pattern from one camera.
#[derive(Clone, Debug)]
pub struct OlatFrame {
    pub image: ImageRgb,
    pub camera: Camera,
    pub pattern: LightPattern,
}

impl OlatFrame {
    /// Checks the image matches the camera's pixel grid.
    pub fn validate(&self) -> Result<()> {
        if self.image.width() != self.camera.width || self.image.height() != self.camera.height
        {
            return Err(Error::InvalidArgument(format!(
                "frame image is {}x{}, camera expects {}x{}",
                self.image.width(),
                self.image.height(),
                self.camera.width,
                self.camera.height
            )));
        }
        Ok(())
    }
}

/// Loss weights and optimizer schedule. The defaults mirror the fitting
/// setup the renderer was designed around; every λ is dimensionless.
#[derive(Clone, Debug)]
pub struct FitConfig {
    /// Weight of the image L1 term (default 10).
    pub lambda_l1: f64,
    /// Weight of the D-SSIM term (default 0.2).
    pub lambda_ssim: f64,
    /// Weight of the scale-range penalty (default 1e-2).
    pub lambda_scale: f64,
    /// Weight of the negative-diffuse-color penalty (default 1e-2).
    pub lambda_negcolor: f64,
    /// Eye-group scale penalty weight (default 1e-2).
    pub lambda_eye_scale: f64,
    /// Eye-group opacity penalty weight (default 1e-4).
    pub lambda_eye_opacity: f64,
    /// Eye-group visibility penalty weight (default 1e-4).
    pub lambda_eye_visibility: f64,
    /// Optional position anchor `λ·mean‖p − p_init‖²` (default off).
    pub lambda_anchor: Option<f64>,
    /// Adam learning rate (default 5e-4).
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Frames per iteration (clamped to the dataset size).
    pub batch_size: usize,
    pub iterations: usize,
    /// Seed for batch sampling.
    pub seed: u64,
    /// Keep every monochrome transfer band at its initial value (the
    /// mono-band ablation).
    pub freeze_d_m: bool,
    /// Write a checkpoint scene every this many iterations (0 = never).
    pub checkpoint_every: usize,
    /// Where checkpoints go; checkpointing is off without it.
    pub checkpoint_dir: Option<PathBuf>,
}

impl Default for FitConfig {
    fn default() -> FitConfig {
        FitConfig {
            lambda_l1: 10.0,
            lambda_ssim: 0.2,
            lambda_scale: 1e-2,
            lambda_negcolor: 1e-2,
            lambda_eye_scale: 1e-2,
            lambda_eye_opacity: 1e-4,
            lambda_eye_visibility: 1e-4,
            lambda_anchor: None,
            lr: 5e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            batch_size: 8,
            iterations: 1000,
            seed: 0,
            freeze_d_m: false,
            checkpoint_every: 0,
            checkpoint_dir: None,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        let lambdas = [
            ("lambda_l1", self.lambda_l1),
            ("lambda_ssim", self.lambda_ssim),
            ("lambda_scale", self.lambda_scale),
            ("lambda_negcolor", self.lambda_negcolor),
            ("lambda_eye_scale", self.lambda_eye_scale),
            ("lambda_eye_opacity", self.lambda_eye_opacity),
            ("lambda_eye_visibility", self.lambda_eye_visibility),
            ("lambda_anchor", self.lambda_anchor.unwrap_or(0.0)),
        ];
        for (name, l) in lambdas {
            if !(l >= 0.0) || !l.is_finite() {
                return Err(Error::InvalidArgument(format!("{name} must be ≥ 0, got {l}")));
            }
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "learning rate must be > 0, got {}",
                self.lr
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch size must be ≥ 1".into()));
        }
        Ok(())
    }
}

/// Light rig shape for synthetic datasets.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PatternKind {
    /// One pattern per light, one light per pattern.
    Olat,
    /// Random multi-light groupings (see [`grouped_rig`]).
    Grouped { group_size: usize, n_patterns: usize },
}

/// Renders a reference cloud under `n_lights` rig lights from `n_cams`
/// cameras on a view sphere; ground truth for recovery experiments.
///
/// Cameras sit on a Fibonacci sphere at 3.5× the cloud's bounding radius,
/// looking at its centroid, with the focal length chosen to frame the
/// cloud with a ~25% margin. Frames are ordered camera-major: frame
/// `c·P + p` is camera `c` under pattern `p` (`P` = pattern count).
/// Backgrounds are black. Deterministic for a fixed seed.
pub fn synth_dataset(
    cloud: &GaussianCloud,
    n_cams: usize,
    n_lights: usize,
    kind: PatternKind,
    width: usize,
    height: usize,
    seed: u64,
) -> Result<Vec<OlatFrame>> {
    if n_cams == 0 || n_lights == 0 {
        return Err(Error::InvalidArgument(format!(
            "dataset needs at least one camera and one light, got {n_cams}/{n_lights}"
        )));
    }
    if cloud.gaussians.is_empty() {
        return Err(Error::InvalidArgument("dataset needs a non-empty cloud".into()));
    }
    let patterns = match kind {
        PatternKind::Olat => olat_rig(n_lights),
        PatternKind::Grouped { group_size, n_patterns } => {
            grouped_rig(n_lights, group_size, n_patterns, seed)?
        }
    };

    // Frame the cloud: centroid, then a radius that covers every Gaussian
    // with three standard deviations to spare.
    let n = cloud.gaussians.len() as f64;
    let centroid = cloud.gaussians.iter().fold(Vec3::zeros(), |a, g| a + g.pos) / n;
    let r_max = cloud
        .gaussians
        .iter()
        .map(|g| (g.pos - centroid).norm() + 3.0 * g.scale().max())
        .fold(0.0, f64::max)
        .max(1e-6);
    let dist = 3.5 * r_max;
    let fx = 0.5 * width as f64 * (dist - r_max) / (1.25 * r_max);

    let cameras: Result<Vec<Camera>> = fibonacci_sphere(n_cams)
        .into_iter()
        .map(|d| {
            let up = if d.y.abs() < 0.95 { Vec3::y() } else { Vec3::x() };
            Camera::look_at(centroid + dist * d.as_vec(), centroid, up, fx, width, height)
        })
        .collect();
    let cameras = cameras?;

    let shs: Vec<_> = patterns.iter().map(|p| p.to_sh(LIGHT_ORDER)).collect();
    let jobs: Vec<(usize, usize)> = (0..n_cams)
        .flat_map(|c| (0..patterns.len()).map(move |p| (c, p)))
        .collect();
    jobs.par_iter()
        .map(|&(c, p)| {
            let cam = &cameras[c];
            let eye = -(cam.rotation.transpose() * cam.translation);
            let ctx = ShadeContext::points(&shs[p], &patterns[p], eye)?;
            let (image, _, _) = render(cloud, &ctx, cam, Rgb::zeros())?;
            Ok(OlatFrame { image, camera: cam.clone(), pattern: patterns[p].clone() })
        })
        .collect()
}

/// Peak signal-to-noise ratio and structural similarity of a prediction
/// against ground truth.
#[derive(Clone, Copy, Debug)]
pub struct Metrics {
    /// dB on a [0, 1] dynamic range, capped at 99 (identical images).
    pub psnr: f64,
    pub ssim: f64,
}

/// PSNR cap reported for an exact match.
pub const PSNR_CAP: f64 = 99.0;

fn psnr_from_mse(mse: f64) -> f64 {
    if mse <= 0.0 {
        return PSNR_CAP;
    }
    (-10.0 * mse.log10()).min(PSNR_CAP)
}

/// Image-quality metrics over the full frame.
pub fn metrics(pred: &ImageRgb, gt: &ImageRgb) -> Result<Metrics> {
    if pred.width() != gt.width() || pred.height() != gt.height() {
        return Err(Error::InvalidArgument(format!(
            "metrics need matching sizes, got {}x{} vs {}x{}",
            pred.width(),
            pred.height(),
            gt.width(),
            gt.height()
        )));
    }
    let mut mse = 0.0;
    for (p, g) in pred.pixels().iter().zip(gt.pixels()) {
        let d = p - g;
        mse += d.norm_squared();
    }
    mse /= (pred.width() * pred.height() * 3) as f64;
    Ok(Metrics { psnr: psnr_from_mse(mse), ssim: ssim::ssim(pred, gt)? })
}

/// Metrics restricted to the masked region (mask > 0.5): PSNR over masked
/// pixels, SSIM over windows centered on them.
pub fn metrics_masked(pred: &ImageRgb, gt: &ImageRgb, mask: &ImageGray) -> Result<Metrics> {
    if mask.width() != pred.width() || mask.height() != pred.height() {
        return Err(Error::InvalidArgument(format!(
            "mask size {}x{} does not match image size {}x{}",
            mask.width(),
            mask.height(),
            pred.width(),
            pred.height()
        )));
    }
    let mut mse = 0.0;
    let mut count = 0usize;
    for y in 0..pred.height() {
        for x in 0..pred.width() {
            if mask.get(x, y) > 0.5 {
                let d = pred.get(x, y) - gt.get(x, y);
                mse += d.norm_squared();
                count += 1;
            }
        }
    }
    if count == 0 {
        return Err(Error::InvalidArgument("mask selects no pixels".into()));
    }
    mse /= (count * 3) as f64;
    Ok(Metrics { psnr: psnr_from_mse(mse), ssim: ssim::ssim_masked(pred, gt, mask)? })
}

/// Loss record of one iteration.
#[derive(Clone, Copy, Debug)]
pub struct IterationStats {
    pub iteration: usize,
    pub loss: LossBreakdown,
}

/// A fitted cloud plus the loss trajectory that produced it.
#[derive(Clone, Debug)]
pub struct FitResult {
    pub cloud: GaussianCloud,
    pub history: Vec<IterationStats>,
}

/// Writes the loss history as CSV (`iteration,total,…`), one row per
/// iteration.
pub fn write_history_csv(path: &Path, history: &[IterationStats]) -> Result<()> {
    use std::io::Write;
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "iteration,total,rec_l1,rec_ssim,negcolor,scale,eye,anchor")?;
    for s in history {
        let l = &s.loss;
        writeln!(
            w,
            "{},{:.12e},{:.12e},{:.12e},{:.12e},{:.12e},{:.12e},{:.12e}",
            s.iteration, l.total, l.rec_l1, l.rec_ssim, l.negcolor, l.scale, l.eye, l.anchor
        )?;
    }
    Ok(())
}

/// Fits `init` to the dataset by Adam on the full analytic gradient.
///
/// Deterministic for a fixed config (seeded batch sampling, fixed-order
/// reductions). Honors the cloud's eye-constraint freeze and the
/// config's mono-band freeze. When a checkpoint directory is set, scenes
/// are written every `checkpoint_every` iterations; a non-finite loss
/// aborts with [`Error::Diverged`] carrying the last good checkpoint
/// (which is written on abort if checkpointing is configured).
pub fn fit(dataset: &[OlatFrame], init: &GaussianCloud, cfg: &FitConfig) -> Result<FitResult> {
    cfg.validate()?;
    init.validate()?;
    if dataset.is_empty() {
        return Err(Error::InvalidArgument("fitting needs a non-empty dataset".into()));
    }
    for f in dataset {
        f.validate()?;
    }

    let anchors: Option<Vec<Vec3>> =
        cfg.lambda_anchor.map(|_| init.gaussians.iter().map(|g| g.pos).collect());
    let mut cloud = init.clone();
    let mut params = pack_params(&cloud);
    let mut prev_params = params.clone();
    let mut adam = adam::Adam::new(params.len(), cfg.lr, cfg.beta1, cfg.beta2, cfg.eps);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let batch = cfg.batch_size.min(dataset.len());
    let mut history = Vec::with_capacity(cfg.iterations);
    let mut last_checkpoint: Option<PathBuf> = None;

    for iteration in 0..cfg.iterations {
        let frames: Vec<&OlatFrame> = if batch == dataset.len() {
            dataset.iter().collect()
        } else {
            rand::seq::index::sample(&mut rng, dataset.len(), batch)
                .iter()
                .map(|i| &dataset[i])
                .collect()
        };

        let step = total_loss(&cloud, &frames, cfg, anchors.as_deref()).and_then(
            |(breakdown, mut grads)| {
                grads::zero_frozen(&mut grads, &cloud, cfg.freeze_d_m);
                prev_params.copy_from_slice(&params);
                adam.step(&mut params, &grads::pack_grads(&grads))?;
                unpack_params(&mut cloud, &params)?;
                grads::renormalize(&mut cloud)?;
                params = pack_params(&cloud);
                Ok(breakdown)
            },
        );
        let breakdown = match step {
            Ok(b) => b,
            Err(e) => {
                // Roll back to the last finite state and surface it.
                if let Some(dir) = &cfg.checkpoint_dir {
                    let mut good = init.clone();
                    if unpack_params(&mut good, &prev_params).is_ok() {
                        let path = dir.join("last_good.rgsc");
                        if save_scene(&good, &path).is_ok() {
                            last_checkpoint = Some(path);
                        }
                    }
                }
                log::warn!("fit diverged at iteration {iteration}: {e}");
                return Err(Error::Diverged {
                    iteration,
                    last_checkpoint: last_checkpoint
                        .map(|p| p.display().to_string()),
                });
            }
        };
        history.push(IterationStats { iteration, loss: breakdown });

        if cfg.checkpoint_every > 0 && (iteration + 1) % cfg.checkpoint_every == 0 {
            if let Some(dir) = &cfg.checkpoint_dir {
                let path = dir.join(format!("checkpoint_{:06}.rgsc", iteration + 1));
                save_scene(&cloud, &path)?;
                last_checkpoint = Some(path);
            }
        }
    }

    Ok(FitResult { cloud, history })
}

// ---- Dataset serialization: PFM images + JSON manifest ----

#[derive(Serialize, Deserialize)]
struct CameraJson {
    fx: f64,
    fy: f64,
    cx: f64,
    cy: f64,
    width: usize,
    height: usize,
    /// Row-major world-to-camera rotation.
    rotation: [[f64; 3]; 3],
    translation: [f64; 3],
}

impl CameraJson {
    fn of(cam: &Camera) -> CameraJson {
        let r = &cam.rotation;
        CameraJson {
            fx: cam.fx,
            fy: cam.fy,
            cx: cam.cx,
            cy: cam.cy,
            width: cam.width,
            height: cam.height,
            rotation: [
                [r[(0, 0)], r[(0, 1)], r[(0, 2)]],
                [r[(1, 0)], r[(1, 1)], r[(1, 2)]],
                [r[(2, 0)], r[(2, 1)], r[(2, 2)]],
            ],
            translation: [cam.translation.x, cam.translation.y, cam.translation.z],
        }
    }

    fn build(&self) -> Result<Camera> {
        let r = self.rotation;
        Camera::new(
            self.fx,
            self.fy,
            self.cx,
            self.cy,
            self.width,
            self.height,
            crate::Mat3::new(
                r[0][0], r[0][1], r[0][2], r[1][0], r[1][1], r[1][2], r[2][0], r[2][1], r[2][2],
            ),
            Vec3::new(self.translation[0], self.translation[1], self.translation[2]),
        )
    }
}

#[derive(Serialize, Deserialize)]
struct LightJson {
    dir: [f64; 3],
    intensity: [f64; 3],
}

#[derive(Serialize, Deserialize)]
struct FrameJson {
    image: String,
    camera: CameraJson,
    lights: Vec<LightJson>,
}

#[derive(Serialize, Deserialize)]
struct ManifestJson {
    seed: u64,
    frames: Vec<FrameJson>,
}

/// Writes a dataset as `frame_%05u.pfm` images plus `manifest.json`
/// (cameras, light patterns, generator seed) in `dir`.
pub fn save_dataset(dir: &Path, frames: &[OlatFrame], seed: u64) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut manifest = ManifestJson { seed, frames: Vec::with_capacity(frames.len()) };
    for (i, f) in frames.iter().enumerate() {
        f.validate()?;
        let name = format!("frame_{i:05}.pfm");
        write_pfm(&dir.join(&name), &f.image)?;
        manifest.frames.push(FrameJson {
            image: name,
            camera: CameraJson::of(&f.camera),
            lights: f
                .pattern
                .lights
                .iter()
                .map(|l| LightJson {
                    dir: [l.dir.x, l.dir.y, l.dir.z],
                    intensity: [l.intensity.x, l.intensity.y, l.intensity.z],
                })
                .collect(),
        });
    }
    let file = std::fs::File::create(dir.join("manifest.json"))?;
    serde_json::to_writer_pretty(std::io::BufWriter::new(file), &manifest)?;
    Ok(())
}

/// Loads a dataset saved by [`save_dataset`]; returns the frames and the
/// recorded generator seed.
pub fn load_dataset(dir: &Path) -> Result<(Vec<OlatFrame>, u64)> {
    let manifest_path = dir.join("manifest.json");
    let file = std::fs::File::open(&manifest_path)
        .map_err(|e| Error::format(manifest_path.display().to_string(), e.to_string()))?;
    let manifest: ManifestJson = serde_json::from_reader(std::io::BufReader::new(file))?;
    let mut frames = Vec::with_capacity(manifest.frames.len());
    for fj in &manifest.frames {
        let image = read_pfm(&dir.join(&fj.image))?;
        let camera = fj.camera.build()?;
        let lights: Result<Vec<PointLight>> = fj
            .lights
            .iter()
            .map(|l| {
                Ok(PointLight {
                    dir: Dir::from_xyz(l.dir[0], l.dir[1], l.dir[2])?,
                    intensity: Rgb::new(l.intensity[0], l.intensity[1], l.intensity[2]),
                })
            })
            .collect();
        let frame = OlatFrame { image, camera, pattern: LightPattern::new(lights?) };
        frame.validate()?;
        frames.push(frame);
    }
    Ok((frames, manifest.seed))
}
