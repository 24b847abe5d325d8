//! `render`, `schedule`, `budget` and `extract`.

use std::fmt::Write as _;
use std::path::Path;

use occufield::extract::{marching_cubes, IsoMesh};
use occufield::field::{AnalyticField, BoundSiren, FilmSirenField, SceneField};
use occufield::image::Image;
use occufield::metrics::psnr;
use occufield::render::{render_image, RenderConfig, RenderDiagnostics, RenderMode, RenderSeed};
use occufield::rootfind::{query_budget, BudgetMode};
use occufield::sampling::ShrinkSchedule;
use occufield::{Error, Result, Vec3};

use crate::config::{io_error, load_neural, FieldSpec, SceneConfig};

/// A field ready for evaluation.
pub enum LoadedField {
    Analytic(AnalyticField),
    Neural { field: FilmSirenField, latent: Vec<f64> },
}

impl LoadedField {
    pub fn load(config: &SceneConfig, latent_seed: Option<u64>) -> Result<Self> {
        Ok(match &config.field {
            FieldSpec::Analytic(a) => LoadedField::Analytic(a.clone()),
            FieldSpec::Neural(spec) => {
                let (field, latent) = load_neural(spec, latent_seed)?;
                LoadedField::Neural { field, latent }
            }
        })
    }

    /// Run `f` against the field as a [`SceneField`].
    pub fn with_scene<T>(&self, f: impl FnOnce(&dyn SceneField) -> Result<T>) -> Result<T> {
        match self {
            LoadedField::Analytic(a) => f(a),
            LoadedField::Neural { field, latent } => {
                let bound = BoundSiren {
                    field,
                    conditioning: field.condition(latent)?,
                };
                f(&bound)
            }
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct RenderOptions {
    pub mode: Option<RenderMode>,
    pub latent_seed: Option<u64>,
    /// Half-width of the sampling window around the located surface; the
    /// whole volume when absent.
    pub delta: Option<f64>,
    /// Also render in this mode and report the PSNR between the two.
    pub compare: Option<RenderMode>,
}

pub fn cmd_render(config: &SceneConfig, options: &RenderOptions) -> Result<(Image, RenderDiagnostics)> {
    if let Some(d) = options.delta {
        if !(d > 0.0) {
            return Err(Error::Config("--delta must be positive".into()));
        }
    }
    let field = LoadedField::load(config, options.latent_seed)?;
    let camera = config.frontal_camera()?;
    let render = RenderConfig {
        mode: options.mode.unwrap_or(config.render.mode),
        ..config.render
    };
    let seed = RenderSeed { seed: config.seed, image: 0, pass: 0 };
    field.with_scene(|scene| {
        let out = render_image(scene, &camera, config.bounds(), &render, options.delta, seed)?;
        let mut diagnostics = out.diagnostics;
        if let Some(mode) = options.compare {
            let other = RenderConfig { mode, ..render };
            let reference = render_image(scene, &camera, config.bounds(), &other, options.delta, seed)?;
            diagnostics.psnr_vs_reference = Some(psnr(&out.image, &reference.image)?);
        }
        Ok((out.image, diagnostics))
    })
}

/// Write `.png` through the image crate, anything else as binary PPM.
pub fn write_image(image: &Image, path: &Path) -> Result<()> {
    let is_png = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("png"));
    if is_png {
        let buf = image::RgbImage::from_raw(image.width as u32, image.height as u32, image.to_rgb8())
            .ok_or_else(|| Error::Numeric { what: "image buffer size".into() })?;
        buf.save(path).map_err(|e| Error::Io(std::io::Error::other(format!("{}: {e}", path.display()))))
    } else {
        std::fs::write(path, image.to_ppm()).map_err(|e| io_error(path, e))
    }
}

/// `n,delta` rows for `n = 0, every, 2 every, ...` up to `max_step`.
pub fn cmd_schedule(schedule: &ShrinkSchedule, max_step: u64, every: u64) -> Result<String> {
    if every == 0 {
        return Err(Error::Config("--every must be at least 1".into()));
    }
    schedule.validate()?;
    let mut out = String::from("n,delta\n");
    let mut n = 0;
    loop {
        let _ = writeln!(out, "{n},{}", schedule.delta(n));
        if n >= max_step {
            break;
        }
        n = (n + every).min(max_step);
    }
    Ok(out)
}

/// Queries per pixel of the three rendering strategies.
pub fn cmd_budget(m: usize, ms: usize, n: usize) -> Result<[(BudgetMode, usize); 3]> {
    if m == 0 || n == 0 {
        return Err(Error::Config("--m and --n must be positive".into()));
    }
    Ok([BudgetMode::Cumulative, BudgetMode::SurfaceOnly, BudgetMode::HierarchicalBaseline]
        .map(|mode| (mode, query_budget(m, ms, n, mode))))
}

pub fn budget_table(rows: &[(BudgetMode, usize)]) -> String {
    let mut out = String::from("mode,queries\n");
    for (mode, q) in rows {
        let name = match mode {
            BudgetMode::Cumulative => "cumulative",
            BudgetMode::SurfaceOnly => "surface_only",
            BudgetMode::HierarchicalBaseline => "hierarchical_baseline",
        };
        let _ = writeln!(out, "{name},{q}");
    }
    out
}

/// Axis-aligned cube around the look-at point whose half-size is half the
/// depth range.
pub fn extraction_box(config: &SceneConfig) -> (Vec3, Vec3) {
    let c = config.pose.target();
    let h = 0.5 * (config.bounds[1] - config.bounds[0]);
    (c - Vec3::repeat(h), c + Vec3::repeat(h))
}

pub fn cmd_extract(config: &SceneConfig, resolution: usize, latent_seed: Option<u64>) -> Result<IsoMesh> {
    let field = LoadedField::load(config, latent_seed)?;
    let (lo, hi) = extraction_box(config);
    field.with_scene(|scene| marching_cubes(scene, lo, hi, resolution, config.render.root.tau))
}
