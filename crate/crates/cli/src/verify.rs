//! Oracle suites behind `occufield verify`.

use occufield::field::{AnalyticField, FilmSirenField, SceneField, Shape, SirenDims};
use occufield::loss::{random_perturbation, LossWeights, EPS_NORMAL};
use occufield::metrics::{equivalence_report, EquivalenceRow};
use occufield::rootfind::{locate_on_profile, locate_surface, RootFinder};
use occufield::sampling::{sample_pose, stratified_samples, Camera, PoseDistribution, Ray};
use occufield::train::{
    check_loss_gradient, check_output_gradient, probe_indices, GradCheckReport, Probe, TrainRay, TrainSettings,
};
use occufield::{Error, Result, Vec3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::commands::LoadedField;
use crate::config::{FieldSpec, SceneConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Suite {
    Equivalence,
    Rootfind,
    Gradients,
    All,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteReport {
    pub suite: Suite,
    pub passed: bool,
    pub summary: Value,
    /// Violating cases, serialized.
    pub failures: Vec<Value>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub passed: bool,
    pub suites: Vec<SuiteReport>,
}

pub const VERIFY_RAYS: usize = 1000;
pub const ROOT_TOLERANCE: f64 = 1e-3;
pub const SECANT_TOLERANCE: f64 = 1e-12;
pub const EQUIVALENCE_DELTAS: [f64; 3] = [0.1, 0.03, 0.01];
pub const GRADIENT_TOLERANCE: f64 = 1e-4;
/// Step for parameter probes of network outputs.
pub const H_OUTPUT: f64 = 1e-5;
/// Step for parameter probes of loss terms.
pub const H_LOSS: f64 = 1e-4;
/// Failures kept in a report.
const MAX_FAILURES: usize = 20;

pub fn cmd_verify(config: &SceneConfig, suite: Suite, latent_seed: Option<u64>) -> Result<VerifyReport> {
    let suites = match suite {
        Suite::All => vec![Suite::Rootfind, Suite::Equivalence, Suite::Gradients],
        s => vec![s],
    };
    let mut reports = Vec::new();
    for s in suites {
        reports.push(match s {
            Suite::Rootfind => match &config.field {
                FieldSpec::Analytic(f) => {
                    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
                    let rays = rays_into_shape(f, config, VERIFY_RAYS, &mut rng)?;
                    rootfind_suite(f, &rays, &config.render.root)
                }
                FieldSpec::Neural(_) => skipped(s, "root-finding oracle needs an analytic field"),
            },
            Suite::Equivalence => {
                let field = LoadedField::load(config, latent_seed)?;
                let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
                let rays = pose_rays(config, VERIFY_RAYS, &mut rng)?;
                field.with_scene(|scene| {
                    equivalence_suite(scene, &rays, &EQUIVALENCE_DELTAS, config.render.samples, &config.render.root, config.seed)
                })?
            }
            Suite::Gradients => gradient_suite(config.seed)?,
            Suite::All => unreachable!(),
        });
    }
    Ok(VerifyReport {
        passed: reports.iter().all(|r| r.passed),
        suites: reports,
    })
}

fn skipped(suite: Suite, why: &str) -> SuiteReport {
    SuiteReport {
        suite,
        passed: true,
        summary: json!({ "skipped": why }),
        failures: Vec::new(),
    }
}

/// Rays through random pixels of cameras drawn from the pose distribution.
pub fn pose_rays<R: Rng + ?Sized>(config: &SceneConfig, n: usize, rng: &mut R) -> Result<Vec<Ray>> {
    let (tn, tf) = config.bounds();
    (0..n)
        .map(|_| {
            let pose = sample_pose(&config.pose, rng)?;
            let cam = Camera::new(pose, config.camera.fov_deg, config.camera.width, config.camera.height)?;
            let (i, j) = (rng.random_range(0..cam.width), rng.random_range(0..cam.height));
            Ray::new(pose.position, cam.pixel_direction(i, j), tn, tf)
        })
        .collect()
}

/// Rays from camera positions of the pose distribution through random
/// points at least one root-finding bin deep inside the shape, so that the
/// bin scan is guaranteed to bracket a crossing.
pub fn rays_into_shape<R: Rng + ?Sized>(
    field: &AnalyticField,
    config: &SceneConfig,
    n: usize,
    rng: &mut R,
) -> Result<Vec<Ray>> {
    let (tn, tf) = config.bounds();
    let min_depth = (tf - tn) / config.render.root.bins as f64;
    let dist = &config.pose;
    aimed_rays(&field.shape, dist, (tn, tf), min_depth, n, rng)
}

pub fn aimed_rays<R: Rng + ?Sized>(
    shape: &Shape,
    poses: &PoseDistribution,
    bounds: (f64, f64),
    min_depth: f64,
    n: usize,
    rng: &mut R,
) -> Result<Vec<Ray>> {
    let half = 0.5 * (bounds.1 - bounds.0);
    let target = poses.target();
    let mut rays = Vec::with_capacity(n);
    let mut attempts = 0usize;
    while rays.len() < n {
        attempts += 1;
        if attempts > 1000 * n {
            return Err(Error::Config("shape has too little volume inside the depth bounds to aim rays".into()));
        }
        let p = target + Vec3::from_fn(|_, _| rng.random_range(-half..half));
        if !shape.inside_distance(&p).is_some_and(|(d, _)| d >= min_depth) {
            continue;
        }
        let pose = sample_pose(poses, rng)?;
        let ray = Ray::new(pose.position, p - pose.position, bounds.0, bounds.1)?;
        if entry_depth(shape, &ray).is_some() {
            rays.push(ray);
        }
    }
    Ok(rays)
}

/// First depth in the ray's bounds where the shape's inside distance turns
/// from negative to non-negative. Closed form for spheres, a dense scan
/// refined by bisection otherwise.
pub fn entry_depth(shape: &Shape, ray: &Ray) -> Option<f64> {
    let d = |t: f64| shape.inside_distance(&ray.at(t)).map(|(d, _)| d);
    if d(ray.t_near)? >= 0.0 {
        return None;
    }
    if let Shape::Sphere { center, radius } = shape {
        let oc = ray.origin - Vec3::from(*center);
        let b = oc.dot(&ray.direction);
        let disc = b * b - (oc.norm_squared() - radius * radius);
        if disc < 0.0 {
            return None;
        }
        let t = -b - disc.sqrt();
        return (t >= ray.t_near && t <= ray.t_far).then_some(t);
    }
    const SCAN: usize = 20_000;
    let step = ray.extent() / SCAN as f64;
    let mut prev = ray.t_near;
    for i in 1..=SCAN {
        let t = ray.t_near + step * i as f64;
        if d(t)? >= 0.0 {
            let (mut lo, mut hi) = (prev, t);
            for _ in 0..200 {
                let mid = 0.5 * (lo + hi);
                if d(mid)? >= 0.0 {
                    hi = mid;
                } else {
                    lo = mid;
                }
                if hi - lo < 1e-14 {
                    break;
                }
            }
            return Some(0.5 * (lo + hi));
        }
        prev = t;
    }
    None
}

pub fn rootfind_suite(field: &AnalyticField, rays: &[Ray], finder: &RootFinder) -> SuiteReport {
    let mut failures = Vec::new();
    let mut max_err: f64 = 0.0;
    let mut checked = 0;
    for (i, ray) in rays.iter().enumerate() {
        let Some(oracle) = entry_depth(&field.shape, ray) else { continue };
        checked += 1;
        let hit = locate_surface(field, ray, finder);
        let err = if hit.found { (hit.t_s - oracle).abs() } else { f64::INFINITY };
        max_err = max_err.max(err);
        if !(err < ROOT_TOLERANCE) {
            failures.push(json!({ "ray": i, "origin": ray.origin.as_slice(), "direction": ray.direction.as_slice(),
                "oracle": oracle, "found": hit.found, "t_s": hit.t_s }));
        }
    }
    let secant = secant_ramp_errors();
    let secant_max = secant.iter().copied().fold(0.0, f64::max);
    if !(secant_max < SECANT_TOLERANCE) {
        failures.push(json!({ "affine_ramp_max_error": secant_max }));
    }
    let passed = failures.is_empty() && checked > 0;
    failures.truncate(MAX_FAILURES);
    SuiteReport {
        suite: Suite::Rootfind,
        passed,
        summary: json!({
            "rays": rays.len(), "checked": checked, "max_abs_error": max_err, "tolerance": ROOT_TOLERANCE,
            "affine_ramps": secant.len(), "affine_ramp_max_error": secant_max,
        }),
        failures,
    }
}

/// Errors of a single secant step on affine alpha profiles over a grid of
/// slopes and crossing depths.
pub fn secant_ramp_errors() -> Vec<f64> {
    let finder = RootFinder { bins: 12, secant_steps: 1, tau: 0.5 };
    let (tn, tf) = (0.88, 1.12);
    let mut errs = Vec::new();
    for slope in [0.5, 1.0, 3.0, 4.1, 7.7] {
        for k in 1..50 {
            let t_star = tn + (tf - tn) * k as f64 / 50.0;
            let hit = locate_on_profile(|t| 0.5 + slope * (t - t_star), tn, tf, &finder);
            errs.push(if hit.found { (hit.t_s - t_star).abs() } else { f64::INFINITY });
        }
    }
    errs
}

pub fn equivalence_suite(
    field: &dyn SceneField,
    rays: &[Ray],
    deltas: &[f64],
    samples: usize,
    root: &RootFinder,
    seed: u64,
) -> Result<SuiteReport> {
    let rows = equivalence_report(field, rays, deltas, samples, root, seed)?;
    let violations: Vec<&EquivalenceRow> = rows.iter().filter(|r| r.violated).collect();
    let monotone = is_monotone(&rows);
    let mut failures: Vec<Value> = violations.iter().map(|r| json!(r)).collect();
    if !monotone {
        failures.push(json!({ "non_monotone": rows }));
    }
    Ok(SuiteReport {
        suite: Suite::Equivalence,
        passed: failures.is_empty(),
        summary: json!({ "rays": rays.len(), "samples": samples, "rows": rows, "monotone": monotone }),
        failures,
    })
}

/// Observed differences never grow as `delta_min` shrinks, per channel.
pub fn is_monotone(rows: &[EquivalenceRow]) -> bool {
    let mut sorted: Vec<&EquivalenceRow> = rows.iter().collect();
    sorted.sort_by(|a, b| b.delta_min.total_cmp(&a.delta_min));
    sorted
        .windows(2)
        .all(|w| (0..3).all(|c| w[1].observed_max_diff[c] <= w[0].observed_max_diff[c]))
}

/// Small network used by the gradient suite.
pub const PROBE_DIMS: SirenDims = SirenDims { latent_dim: 3, layers: 2, width: 8 };

/// Finite-difference checks of the network outputs and of every training
/// loss term on a small probe network.
pub fn gradient_suite(seed: u64) -> Result<SuiteReport> {
    let mut field = FilmSirenField::new(PROBE_DIMS, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let latent: Vec<f64> = (0..PROBE_DIMS.latent_dim).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mut reports: Vec<GradCheckReport> = Vec::new();

    let x = Vec3::from_fn(|_, _| rng.random_range(-0.1..0.1));
    let d = Vec3::new(rng.random_range(-0.2..0.2), rng.random_range(-0.2..0.2), -1.0).normalize();
    let idx = probe_indices(&field, 200, seed);
    for (name, probe) in [
        ("alpha", Probe::Alpha { x }),
        ("color_r", Probe::Color { x, d, channel: 0 }),
        ("color_g", Probe::Color { x, d, channel: 1 }),
        ("color_b", Probe::Color { x, d, channel: 2 }),
    ] {
        let mut r = check_output_gradient(&mut field, &latent, probe, &idx, H_OUTPUT)?;
        r.name = name.into();
        reports.push(r);
    }

    let rays = probe_batch(&mut rng)?;
    let settings = |rec: f64, normal: f64, opac: f64, normalize: bool| TrainSettings {
        lambda_reconstruction: rec,
        normalize_weights: normalize,
        background: [1.0; 3],
        weights: LossWeights {
            lambda_normal: normal,
            lambda_opac_init: opac,
            gamma_opac: 0.0,
            lambda_opac_cap: 10.0,
            lambda_r1: 10.0,
        },
        step: 0,
    };
    let idx = probe_indices(&field, 150, seed.wrapping_add(1));
    for (name, s) in [
        ("reconstruction", settings(1.0, 0.0, 0.0, false)),
        ("reconstruction_normalized", settings(1.0, 0.0, 0.0, true)),
        ("opacity", settings(0.0, 0.0, 1.0, false)),
        ("normal", settings(0.0, 1.0, 0.0, false)),
        ("total", settings(1.0, 0.05, 0.1, true)),
    ] {
        reports.push(check_loss_gradient(name, &mut field, &latent, &rays, &s, &idx, H_LOSS)?);
    }

    let probes: usize = reports.iter().map(|r| r.probes).sum();
    let worst = reports.iter().map(|r| r.max_rel_err).fold(0.0, f64::max);
    let failures: Vec<Value> = reports
        .iter()
        .filter(|r| !(r.max_rel_err < GRADIENT_TOLERANCE))
        .map(|r| json!(r))
        .collect();
    Ok(SuiteReport {
        suite: Suite::Gradients,
        passed: failures.is_empty(),
        summary: json!({ "probes": probes, "max_rel_err": worst, "tolerance": GRADIENT_TOLERANCE, "checks": reports }),
        failures,
    })
}

fn probe_batch<R: Rng + ?Sized>(rng: &mut R) -> Result<Vec<TrainRay>> {
    (0..4)
        .map(|_| {
            let origin = Vec3::new(rng.random_range(-0.1..0.1), rng.random_range(-0.1..0.1), 1.0);
            let dir = Vec3::new(rng.random_range(-0.1..0.1), rng.random_range(-0.1..0.1), -1.0);
            let ray = Ray::new(origin, dir, 0.88, 1.12)?;
            let depths = stratified_samples(&ray, 6, rng);
            let x = ray.at(1.0);
            Ok(TrainRay {
                ray,
                depths,
                target: [rng.random(), rng.random(), rng.random()],
                scan: stratified_samples(&ray, 3, rng),
                surface: Some((x, random_perturbation(EPS_NORMAL, rng))),
            })
        })
        .collect()
}

