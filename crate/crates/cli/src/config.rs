//! Scene configuration: a single JSON document, optionally expanded from a
//! dataset preset before validation.

use std::path::{Path, PathBuf};

use occufield::field::{AnalyticField, FilmSirenField, SirenDims};
use occufield::loss::LossWeights;
use occufield::render::RenderConfig;
use occufield::rootfind::RootFinder;
use occufield::sampling::{Camera, PoseDistribution, PoseKind, ShrinkSchedule};
use occufield::{Error, Result};
use rand::SeedableRng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum FieldSpec {
    Analytic(AnalyticField),
    Neural(NeuralSpec),
}

/// A FiLM-SIREN field, either loaded from a checkpoint or freshly
/// initialized from `init_seed`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NeuralSpec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,
    #[serde(default)]
    pub dims: SirenDims,
    #[serde(default)]
    pub init_seed: u64,
    #[serde(default)]
    pub latent_seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraSpec {
    pub fov_deg: f64,
    pub width: usize,
    pub height: usize,
}

/// Shrink schedule; `delta_init` defaults to half the depth range.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleSpec {
    pub gamma: f64,
    pub delta_min: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delta_init: Option<f64>,
}

/// Toy reconstruction fit against the analytic field.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FitConfig {
    pub model: SirenDims,
    pub model_seed: u64,
    pub views: usize,
    pub view_resolution: usize,
    pub rays_per_step: usize,
    /// Stratified depths over the whole ray per training ray; those outside
    /// the sampling window enter only the opacity term.
    pub scan_samples: usize,
    pub learning_rate: f64,
    /// Learning rate reached at the last step by exponential decay;
    /// constant when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub final_learning_rate: Option<f64>,
    pub momentum: f64,
    pub lambda_reconstruction: f64,
    /// Global gradient norm limit; zero disables clipping.
    pub grad_clip: f64,
    pub eval_every: u64,
    pub eval_resolution: usize,
    pub concentration_samples: usize,
    /// Reference views are rendered with the ground truth sharpened to this
    /// slope so that its surface colors are exact.
    pub reference_sharpness: f64,
    /// Double the view resolution at these steps.
    pub progressive_steps: Vec<u64>,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            model: SirenDims { latent_dim: 8, layers: 3, width: 32 },
            model_seed: 0,
            views: 24,
            view_resolution: 32,
            rays_per_step: 128,
            scan_samples: 12,
            learning_rate: 1e-3,
            final_learning_rate: None,
            momentum: 0.9,
            lambda_reconstruction: 1.0,
            grad_clip: 1.0,
            eval_every: 250,
            eval_resolution: 24,
            concentration_samples: 36,
            reference_sharpness: 2000.0,
            progressive_steps: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneConfig {
    pub field: FieldSpec,
    pub bounds: [f64; 2],
    pub camera: CameraSpec,
    pub pose: PoseDistribution,
    pub render: RenderConfig,
    pub schedule: ScheduleSpec,
    pub loss: LossWeights,
    #[serde(default)]
    pub fit: FitConfig,
    #[serde(default)]
    pub seed: u64,
}

/// Dataset rows: depth bounds, schedule, loss weights and pose spread.
pub fn preset(name: &str) -> Result<Value> {
    let (bounds, gamma, delta_min, normal, opac_init, gamma_opac, sv, sh, kind) = match name {
        "bfm" => ([0.88, 1.12], 4e-5, 0.01, 0.002, 0.1, 4e-5, 0.155, 0.3, PoseKind::Gaussian),
        "celeba" => ([0.88, 1.12], 1e-5, 0.03, 0.05, 0.01, 0.5e-5, 0.155, 0.3, PoseKind::Gaussian),
        "cats" => ([0.8, 1.2], 2e-5, 0.1, 0.05, 0.02, 1e-5, 0.4, 0.5, PoseKind::Uniform),
        other => return Err(Error::Config(format!("unknown preset {other:?} (expected bfm, celeba or cats)"))),
    };
    Ok(json!({
        "bounds": bounds,
        "camera": { "fov_deg": 12.0, "width": 64, "height": 64 },
        "pose": { "kind": kind, "sigma_v": sv, "sigma_h": sh },
        "render": {
            "samples": 12,
            "root": RootFinder::default(),
            "mode": "alpha_cumulative",
        },
        "schedule": { "gamma": gamma, "delta_min": delta_min },
        "loss": {
            "lambda_normal": normal,
            "lambda_opac_init": opac_init,
            "gamma_opac": gamma_opac,
        },
    }))
}

/// Recursively overlay `top` onto `base`; objects merge, anything else
/// replaces.
fn merge(base: &mut Value, top: Value) {
    match (base, top) {
        (Value::Object(b), Value::Object(t)) => {
            for (k, v) in t {
                match b.get_mut(&k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, t) => *slot = t,
    }
}

impl SceneConfig {
    /// Parse, expand the preset, deserialize strictly and validate.
    pub fn from_json(text: &str) -> Result<Self> {
        let mut value: Value = serde_json::from_str(text)
            .map_err(|e| Error::Config(format!("line {}, column {}: {e}", e.line(), e.column())))?;
        if let Some(obj) = value.as_object_mut() {
            if let Some(p) = obj.remove("preset") {
                let name = p.as_str().ok_or_else(|| Error::Config("preset: expected a string".into()))?;
                let mut base = preset(name)?;
                merge(&mut base, value);
                value = base;
            }
        }
        let config: SceneConfig = serde_path_to_error::deserialize(value).map_err(|e| {
            let path = e.path().to_string();
            Error::Config(format!("{path}: {}", e.into_inner()))
        })?;
        config.validate()?;
        Ok(config)
    }

    /// Load from a file; relative checkpoint paths resolve against the
    /// config's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| io_error(path, e))?;
        let mut config = Self::from_json(&text)?;
        if let FieldSpec::Neural(NeuralSpec { checkpoint: Some(ckpt), .. }) = &mut config.field {
            if ckpt.is_relative() {
                if let Some(dir) = path.parent() {
                    *ckpt = dir.join(&*ckpt);
                }
            }
        }
        Ok(config)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let [tn, tf] = self.bounds;
        if !(tn > 0.0 && tf > tn && tf.is_finite()) {
            return Err(Error::Config(format!("bounds: need 0 < t_near < t_far, got [{tn}, {tf}]")));
        }
        let c = &self.camera;
        if !(c.fov_deg > 0.0 && c.fov_deg < 180.0) || c.width == 0 || c.height == 0 {
            return Err(Error::Config("camera: fov must lie in (0, 180) and resolution be positive".into()));
        }
        match &self.field {
            FieldSpec::Analytic(f) => {
                f.shape.validate()?;
                if !(f.sharpness > 0.0 && f.sharpness.is_finite()) {
                    return Err(Error::Config("field.analytic.sharpness must be positive".into()));
                }
            }
            FieldSpec::Neural(n) => n.dims.validate()?,
        }
        self.pose.validate()?;
        self.render.validate()?;
        self.shrink_schedule()?;
        self.loss.validate()?;
        let f = &self.fit;
        f.model.validate()?;
        if f.views == 0 || f.view_resolution == 0 || f.rays_per_step == 0 || f.eval_resolution == 0 {
            return Err(Error::Config("fit: views, resolutions and rays_per_step must be positive".into()));
        }
        if !(f.learning_rate > 0.0 && (0.0..1.0).contains(&f.momentum) && f.lambda_reconstruction >= 0.0 && f.grad_clip >= 0.0) {
            return Err(Error::Config("fit: need learning_rate > 0, momentum in [0, 1), non-negative weights".into()));
        }
        if f.final_learning_rate.is_some_and(|lr| !(lr > 0.0)) {
            return Err(Error::Config("fit: final_learning_rate must be positive".into()));
        }
        if f.concentration_samples < 2 || f.eval_every == 0 || !(f.reference_sharpness > 0.0) {
            return Err(Error::Config(
                "fit: concentration_samples >= 2, eval_every >= 1, reference_sharpness > 0".into(),
            ));
        }
        Ok(())
    }

    pub fn bounds(&self) -> (f64, f64) {
        (self.bounds[0], self.bounds[1])
    }

    pub fn shrink_schedule(&self) -> Result<ShrinkSchedule> {
        let s = &self.schedule;
        match s.delta_init {
            Some(d) => ShrinkSchedule::new(d, s.gamma, s.delta_min),
            None => ShrinkSchedule::for_bounds(self.bounds[0], self.bounds[1], s.gamma, s.delta_min),
        }
    }

    /// Camera at the centre of the pose distribution.
    pub fn frontal_camera(&self) -> Result<Camera> {
        let pose = occufield::sampling::Pose::orbit(0.0, 0.0, self.pose.radius, self.pose.target())?;
        Camera::new(pose, self.camera.fov_deg, self.camera.width, self.camera.height)
    }
}

/// Standard normal latent clamped to `[-2, 2]`.
pub fn truncated_latent(dim: usize, seed: u64) -> Vec<f64> {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    (0..dim)
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            z.clamp(-2.0, 2.0)
        })
        .collect()
}

/// A neural field from its spec, with the latent it is evaluated at.
pub fn load_neural(spec: &NeuralSpec, latent_seed: Option<u64>) -> Result<(FilmSirenField, Vec<f64>)> {
    let field = match &spec.checkpoint {
        Some(path) => {
            let bytes = std::fs::read(path).map_err(|e| io_error(path, e))?;
            FilmSirenField::from_bytes(&bytes)?
        }
        None => FilmSirenField::new(spec.dims, spec.init_seed)?,
    };
    let latent = truncated_latent(field.dims().latent_dim, latent_seed.unwrap_or(spec.latent_seed));
    Ok((field, latent))
}

/// I/O error annotated with the offending path.
pub fn io_error(path: &Path, e: std::io::Error) -> Error {
    Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))
}
