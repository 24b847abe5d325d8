//! Toy multi-view reconstruction fit of a FiLM-SIREN field to an analytic
//! scene, with an optional shrinking sampling window.

use occufield::autodiff::Sgd;
use occufield::field::{BoundSiren, FilmSirenField, SceneField};
use occufield::image::Image;
use occufield::loss::{random_perturbation, EPS_NORMAL};
use occufield::metrics::{concentration_report, psnr};
use occufield::render::{render_image, RenderConfig, RenderMode, RenderSeed};
use occufield::rootfind::locate_surface;
use occufield::sampling::{
    generate_rays, sample_pose, shrink_window, shrink_window_samples, stratified_samples, Camera, Pose, Ray, ShrinkSchedule,
};
use occufield::train::{batch_gradient, BatchLoss, TrainRay, TrainSettings};
use occufield::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{truncated_latent, FieldSpec, SceneConfig};

/// A step counts toward divergence when its loss exceeds
/// `initial + (DIVERGENCE_FACTOR - 1) * |initial|`, which is
/// `DIVERGENCE_FACTOR * initial` for a positive initial loss.
pub const DIVERGENCE_FACTOR: f64 = 10.0;
/// Consecutive diverged steps before the fit is abandoned.
pub const DIVERGENCE_PATIENCE: u64 = 100;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FitOptions {
    pub steps: u64,
    pub views: Option<usize>,
    pub shrink: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    /// Cumulative render against the reference view.
    pub psnr: f64,
    /// Image mean of the weighted depth variance on equally spaced samples.
    pub sigma_ti: Option<f64>,
    /// Cumulative render against the surface-only render.
    pub surface_psnr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitLogEntry {
    pub step: u64,
    pub delta: f64,
    pub loss: f64,
    pub reconstruction: f64,
    pub normal: f64,
    pub opacity: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eval: Option<EvalMetrics>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub steps: u64,
    pub shrink: bool,
    pub final_delta: f64,
    pub initial_loss: Option<f64>,
    pub final_eval: EvalMetrics,
    pub log: Vec<FitLogEntry>,
}

#[derive(Debug)]
pub enum FitError {
    Field(Error),
    Diverged { step: u64, log: Vec<FitLogEntry> },
}

impl From<Error> for FitError {
    fn from(e: Error) -> Self {
        FitError::Field(e)
    }
}

impl std::fmt::Display for FitError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            FitError::Field(e) => e.fmt(f),
            FitError::Diverged { step, .. } => write!(
                f,
                "training diverged: loss above {DIVERGENCE_FACTOR}x its initial value for {DIVERGENCE_PATIENCE} steps (stopped at step {step})"
            ),
        }
    }
}

impl std::error::Error for FitError {}

pub struct FitOutcome {
    pub field: FilmSirenField,
    pub latent: Vec<f64>,
    pub report: FitReport,
}

/// Training views and their reference images.
struct Views {
    cameras: Vec<Camera>,
    rays: Vec<Vec<Ray>>,
    targets: Vec<Image>,
}

fn reference_config(config: &SceneConfig) -> RenderConfig {
    RenderConfig {
        mode: RenderMode::SurfaceOnly,
        ..config.render
    }
}

fn build_views(
    truth: &dyn SceneField,
    config: &SceneConfig,
    poses: &[Pose],
    resolution: usize,
) -> Result<Views> {
    let bounds = config.bounds();
    let reference = reference_config(config);
    let mut views = Views {
        cameras: Vec::new(),
        rays: Vec::new(),
        targets: Vec::new(),
    };
    for (i, pose) in poses.iter().enumerate() {
        let cam = Camera::new(*pose, config.camera.fov_deg, resolution, resolution)?;
        let seed = RenderSeed { seed: config.seed, image: i as u64, pass: 0 };
        views.targets.push(render_image(truth, &cam, bounds, &reference, None, seed)?.image);
        views.rays.push(generate_rays(&cam, bounds.0, bounds.1)?);
        views.cameras.push(cam);
    }
    Ok(views)
}

struct Evaluator {
    camera: Camera,
    rays: Vec<Ray>,
    reference: Image,
}

impl Evaluator {
    fn new(truth: &dyn SceneField, config: &SceneConfig) -> Result<Self> {
        let res = config.fit.eval_resolution;
        let pose = Pose::orbit(0.0, 0.0, config.pose.radius, config.pose.target())?;
        let camera = Camera::new(pose, config.camera.fov_deg, res, res)?;
        let bounds = config.bounds();
        let seed = RenderSeed { seed: config.seed, image: u64::MAX, pass: 0 };
        let reference = render_image(truth, &camera, bounds, &reference_config(config), None, seed)?.image;
        let rays = generate_rays(&camera, bounds.0, bounds.1)?;
        Ok(Evaluator { camera, rays, reference })
    }

    fn run(&self, field: &dyn SceneField, config: &SceneConfig, delta: f64, step: u64) -> Result<EvalMetrics> {
        let bounds = config.bounds();
        let seed = RenderSeed { seed: config.seed, image: u64::MAX, pass: step };
        let cumulative = RenderConfig {
            mode: RenderMode::AlphaCumulative,
            ..config.render
        };
        let surface = RenderConfig {
            mode: RenderMode::SurfaceOnly,
            ..config.render
        };
        let c = render_image(field, &self.camera, bounds, &cumulative, Some(delta), seed)?.image;
        let s = render_image(field, &self.camera, bounds, &surface, None, seed)?.image;
        let conc = concentration_report(field, &self.rays, config.fit.concentration_samples);
        Ok(EvalMetrics {
            psnr: psnr(&c, &self.reference)?,
            sigma_ti: conc.mean,
            surface_psnr: psnr(&c, &s)?,
        })
    }
}

/// Window of the shrink schedule at `step`, frozen at the full volume
/// without shrinking.
pub fn fit_delta(schedule: &ShrinkSchedule, step: u64, shrink: bool) -> f64 {
    if shrink {
        schedule.delta(step)
    } else {
        schedule.delta_init
    }
}

/// Train against the analytic field of `config`. `on_log` sees every log
/// entry as it is produced.
pub fn fit(
    config: &SceneConfig,
    options: &FitOptions,
    mut on_log: impl FnMut(&FitLogEntry),
) -> std::result::Result<FitOutcome, FitError> {
    let FieldSpec::Analytic(truth) = &config.field else {
        return Err(Error::Config("fit needs an analytic ground-truth field".into()).into());
    };
    let fc = &config.fit;
    let mut sharp = truth.clone();
    sharp.sharpness = fc.reference_sharpness;
    let schedule = config.shrink_schedule()?;
    let n_views = options.views.unwrap_or(fc.views);
    if n_views == 0 {
        return Err(Error::Config("fit needs at least one view".into()).into());
    }

    let mut pose_rng = ChaCha8Rng::seed_from_u64(config.seed);
    let poses = (0..n_views)
        .map(|_| sample_pose(&config.pose, &mut pose_rng))
        .collect::<Result<Vec<_>>>()?;
    let mut resolution = fc.view_resolution;
    let mut views = build_views(&sharp, config, &poses, resolution)?;
    let evaluator = Evaluator::new(&sharp, config)?;

    let mut field = FilmSirenField::new(fc.model, fc.model_seed)?;
    let latent = truncated_latent(fc.model.latent_dim, config.seed);
    let mut optimizer = Sgd::new(fc.learning_rate, fc.momentum, field.params().len());
    let mut grads = vec![0.0; field.params().len()];
    let mut log = Vec::new();
    let mut initial_loss = None;
    let mut diverged_for = 0;

    for step in 0..options.steps {
        if fc.progressive_steps.contains(&step) {
            resolution *= 2;
            views = build_views(&sharp, config, &poses, resolution)?;
        }
        let delta = fit_delta(&schedule, step, options.shrink);
        let batch = {
            let bound = BoundSiren {
                field: &field,
                conditioning: field.condition(&latent)?,
            };
            sample_batch(&bound, config, &views, delta, step)
        };
        let settings = TrainSettings {
            lambda_reconstruction: fc.lambda_reconstruction,
            normalize_weights: config.render.normalize_weights,
            background: config.render.background,
            weights: config.loss,
            step,
        };
        let loss = batch_gradient(&field, &latent, &batch, &settings, &mut grads)?;
        if !loss.total.is_finite() || grads.iter().any(|g| !g.is_finite()) {
            return Err(Error::Numeric {
                what: format!("non-finite loss or gradient at step {step}"),
            }
            .into());
        }
        let first = *initial_loss.get_or_insert(loss.total);
        diverged_for = if diverged(loss.total, first) { diverged_for + 1 } else { 0 };

        let eval = if step % fc.eval_every == 0 {
            let bound = BoundSiren {
                field: &field,
                conditioning: field.condition(&latent)?,
            };
            Some(evaluator.run(&bound, config, delta, step)?)
        } else {
            None
        };
        let entry = entry(step, delta, &loss, eval);
        on_log(&entry);
        log.push(entry);
        if diverged_for >= DIVERGENCE_PATIENCE {
            return Err(FitError::Diverged { step, log });
        }
        clip_gradient(&mut grads, fc.grad_clip);
        optimizer.learning_rate = learning_rate(fc.learning_rate, fc.final_learning_rate, step, options.steps);
        optimizer.step(field.params_mut(), &grads)?;
    }

    let final_delta = fit_delta(&schedule, options.steps, options.shrink);
    let bound = BoundSiren {
        field: &field,
        conditioning: field.condition(&latent)?,
    };
    let final_eval = evaluator.run(&bound, config, final_delta, options.steps)?;
    let report = FitReport {
        steps: options.steps,
        shrink: options.shrink,
        final_delta,
        initial_loss,
        final_eval,
        log,
    };
    Ok(FitOutcome { field, latent, report })
}

/// Exponential interpolation from `initial` at step 0 to `last` at `steps`.
pub fn learning_rate(initial: f64, last: Option<f64>, step: u64, steps: u64) -> f64 {
    match last {
        Some(last) if steps > 0 => initial * (last / initial).powf(step as f64 / steps as f64),
        _ => initial,
    }
}

/// Rescale `grads` so that its Euclidean norm is at most `limit`.
pub fn clip_gradient(grads: &mut [f64], limit: f64) {
    if limit <= 0.0 {
        return;
    }
    let norm = grads.iter().map(|g| g * g).sum::<f64>().sqrt();
    if norm > limit {
        let s = limit / norm;
        grads.iter_mut().for_each(|g| *g *= s);
    }
}

pub fn diverged(loss: f64, initial: f64) -> bool {
    loss > initial + (DIVERGENCE_FACTOR - 1.0) * initial.abs()
}

fn entry(step: u64, delta: f64, loss: &BatchLoss, eval: Option<EvalMetrics>) -> FitLogEntry {
    FitLogEntry {
        step,
        delta,
        loss: loss.total,
        reconstruction: loss.reconstruction,
        normal: loss.normal,
        opacity: loss.opacity,
        eval,
    }
}

/// Random pixels from random views. Each ray is sampled inside the window
/// around the surface the current field exposes, or across the whole volume
/// when no crossing is found. Scan depths outside the window carry the
/// opacity term only.
fn sample_batch(field: &dyn SceneField, config: &SceneConfig, views: &Views, delta: f64, step: u64) -> Vec<TrainRay> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(step + 1);
    let n = config.render.samples;
    (0..config.fit.rays_per_step)
        .map(|_| {
            let v = rng.random_range(0..views.cameras.len());
            let p = rng.random_range(0..views.rays[v].len());
            let ray = views.rays[v][p];
            let hit = locate_surface(field, &ray, &config.render.root);
            let (depths, scan, surface) = if hit.found {
                let depths = shrink_window_samples(&ray, hit.t_s, delta, n, &mut rng);
                let (lo, hi) = shrink_window(&ray, hit.t_s, delta);
                let mut scan = stratified_samples(&ray, config.fit.scan_samples, &mut rng);
                scan.retain(|t| *t < lo || *t > hi);
                (depths, scan, Some((ray.at(hit.t_s), random_perturbation(EPS_NORMAL, &mut rng))))
            } else {
                (stratified_samples(&ray, n, &mut rng), Vec::new(), None)
            };
            TrainRay {
                ray,
                depths,
                target: views.targets[v].pixels[p],
                scan,
                surface,
            }
        })
        .collect()
}
