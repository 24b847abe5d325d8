//! Density compositing, alpha compositing and surface-only rendering.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::field::{DensityField, SceneField};
use crate::image::Image;
use crate::metrics::depth_variance;
use crate::rootfind::{locate_surface, RootFinder, SurfaceHit};
use crate::sampling::{
    generate_rays, hierarchical_fine_samples, pixel_rng, shrink_window, stratified_samples, Camera, Ray,
};
use crate::{Error, Result};

/// Alphas are clamped to this margin away from 0 and 1 before compositing.
pub const ALPHA_EPS: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RenderMode {
    DensityCumulative,
    AlphaCumulative,
    SurfaceOnly,
}

impl RenderMode {
    pub fn name(self) -> &'static str {
        match self {
            RenderMode::DensityCumulative => "density_cumulative",
            RenderMode::AlphaCumulative => "alpha_cumulative",
            RenderMode::SurfaceOnly => "surface_only",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RenderConfig {
    /// Samples per ray for cumulative modes.
    pub samples: usize,
    pub root: RootFinder,
    pub mode: RenderMode,
    #[serde(default)]
    pub normalize_weights: bool,
    #[serde(default = "white")]
    pub background: [f64; 3],
    /// Extra hierarchical samples drawn from the coarse weights.
    #[serde(default)]
    pub fine_samples: usize,
}

fn white() -> [f64; 3] {
    [1.0; 3]
}

impl Default for RenderConfig {
    fn default() -> Self {
        RenderConfig {
            samples: 12,
            root: RootFinder::default(),
            mode: RenderMode::AlphaCumulative,
            normalize_weights: false,
            background: white(),
            fine_samples: 0,
        }
    }
}

impl RenderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.samples == 0 {
            return Err(Error::Config("samples per ray must be at least 1".into()));
        }
        if self.background.iter().any(|c| !(0.0..=1.0).contains(c)) {
            return Err(Error::Config("background channels must lie in [0, 1]".into()));
        }
        self.root.validate()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RayRenderResult {
    pub color: [f64; 3],
    pub weights: Vec<f64>,
    pub depths: Vec<f64>,
    pub hit: Option<SurfaceHit>,
    pub queries_used: usize,
}

/// Distances between consecutive depths. The last one is the mean of the
/// others, or the full extent for a single sample.
pub fn sample_deltas(depths: &[f64], t_near: f64, t_far: f64) -> Vec<f64> {
    let n = depths.len();
    if n == 0 {
        return Vec::new();
    }
    if n == 1 {
        return vec![t_far - t_near];
    }
    let mut d: Vec<f64> = depths.windows(2).map(|w| w[1] - w[0]).collect();
    let mean = d.iter().sum::<f64>() / (n - 1) as f64;
    d.push(mean);
    d
}

pub fn clamp_alpha(a: f64) -> f64 {
    a.clamp(ALPHA_EPS, 1.0 - ALPHA_EPS)
}

/// `w_i = alpha_i * prod_{j<i} (1 - alpha_j)` on clamped alphas. With
/// `normalize`, the last weight absorbs the remaining transmittance so the
/// weights sum to one.
pub fn alpha_weights(alphas: &[f64], normalize: bool) -> Vec<f64> {
    let mut transmittance = 1.0;
    let mut w: Vec<f64> = alphas
        .iter()
        .map(|a| {
            let a = clamp_alpha(*a);
            let wi = a * transmittance;
            transmittance *= 1.0 - a;
            wi
        })
        .collect();
    if normalize {
        if let Some((last, rest)) = w.split_last_mut() {
            // Rounding can push the leading sum past one near the alpha
            // clamp; the excess comes off the largest weight so that the
            // in-order sum is exactly one.
            let mut s: f64 = rest.iter().sum();
            while s > 1.0 {
                let k = (0..rest.len()).max_by(|&i, &j| rest[i].total_cmp(&rest[j])).unwrap_or(0);
                rest[k] = (rest[k] - (s - 1.0)).max(0.0);
                s = rest.iter().sum();
            }
            *last = 1.0 - s;
        }
    }
    w
}

/// `w_i = T_i (1 - exp(-sigma_i delta_i))`, `T_i = exp(-sum_{j<i} sigma_j delta_j)`.
pub fn density_weights(sigmas: &[f64], deltas: &[f64]) -> Result<Vec<f64>> {
    if sigmas.len() != deltas.len() {
        return Err(Error::DimensionMismatch {
            expected: sigmas.len(),
            found: deltas.len(),
        });
    }
    let mut optical = 0.0f64;
    sigmas
        .iter()
        .zip(deltas)
        .map(|(s, d)| {
            if !(*s >= 0.0) {
                return Err(Error::NegativeDensity(*s));
            }
            let w = (-optical).exp() * -(-s * d).exp_m1();
            optical += s * d;
            Ok(w)
        })
        .collect()
}

/// `sum w_i c_i + background * (1 - sum w_i)`.
pub fn composite(weights: &[f64], colors: &[[f64; 3]], background: [f64; 3]) -> [f64; 3] {
    let mut out = [0.0; 3];
    let mut total = 0.0;
    for (w, c) in weights.iter().zip(colors) {
        for k in 0..3 {
            out[k] += w * c[k];
        }
        total += w;
    }
    let rest = 1.0 - total;
    std::array::from_fn(|k| out[k] + background[k] * rest)
}

/// Alpha compositing recorded on a tape. `alphas` are length-1 nodes and
/// `colors` length-3 nodes; returns the composited color and the weights.
pub fn tape_alpha_composite(
    tape: &mut Tape<'_>,
    alphas: &[Var],
    colors: &[Var],
    normalize: bool,
    background: [f64; 3],
) -> (Var, Vec<Var>) {
    assert_eq!(alphas.len(), colors.len(), "one color per alpha");
    let mut transmittance = tape.constant(&[1.0]);
    let mut weights = Vec::with_capacity(alphas.len());
    for a in alphas {
        let a = tape.clamp(*a, ALPHA_EPS, 1.0 - ALPHA_EPS);
        weights.push(tape.mul(a, transmittance));
        let keep = tape.one_minus(a);
        transmittance = tape.mul(transmittance, keep);
    }
    if normalize && !weights.is_empty() {
        let n = weights.len();
        let rest = tape.concat(&weights[..n - 1]);
        let rest = tape.sum(rest);
        weights[n - 1] = tape.one_minus(rest);
    }
    let mut color = tape.constant(&[0.0; 3]);
    for (w, c) in weights.iter().zip(colors) {
        let wc = tape.mul(*w, *c);
        color = tape.add(color, wc);
    }
    if !normalize {
        let all = tape.concat(&weights);
        let total = tape.sum(all);
        let rest = tape.one_minus(total);
        let bg = tape.constant(&background);
        let fill = tape.mul(rest, bg);
        color = tape.add(color, fill);
    }
    (color, weights)
}

pub fn render_density_cumulative(
    field: &dyn DensityField,
    ray: &Ray,
    depths: &[f64],
    background: [f64; 3],
) -> Result<RayRenderResult> {
    let deltas = sample_deltas(depths, ray.t_near, ray.t_far);
    let mut sigmas = Vec::with_capacity(depths.len());
    let mut colors = Vec::with_capacity(depths.len());
    for t in depths {
        let x = ray.at(*t);
        sigmas.push(field.density(&x));
        colors.push(field.color(&x, &ray.direction));
    }
    let weights = density_weights(&sigmas, &deltas)?;
    Ok(RayRenderResult {
        color: composite(&weights, &colors, background),
        weights,
        depths: depths.to_vec(),
        hit: None,
        queries_used: depths.len(),
    })
}

pub fn render_alpha_cumulative(
    field: &dyn SceneField,
    ray: &Ray,
    depths: &[f64],
    normalize: bool,
    background: [f64; 3],
) -> RayRenderResult {
    let (alphas, colors): (Vec<f64>, Vec<[f64; 3]>) = depths
        .iter()
        .map(|t| {
            let o = field.output(&ray.at(*t), &ray.direction);
            (o.alpha, o.color)
        })
        .unzip();
    let weights = alpha_weights(&alphas, normalize);
    RayRenderResult {
        color: composite(&weights, &colors, background),
        weights,
        depths: depths.to_vec(),
        hit: None,
        queries_used: depths.len(),
    }
}

/// Density compositing of an alpha field with per-sample densities
/// `-ln(1 - alpha_i) / delta_i`, so that it reproduces alpha compositing.
pub fn render_alpha_as_density(
    field: &dyn SceneField,
    ray: &Ray,
    depths: &[f64],
    background: [f64; 3],
) -> Result<RayRenderResult> {
    let deltas = sample_deltas(depths, ray.t_near, ray.t_far);
    let mut sigmas = Vec::with_capacity(depths.len());
    let mut colors = Vec::with_capacity(depths.len());
    for (t, d) in depths.iter().zip(&deltas) {
        let o = field.output(&ray.at(*t), &ray.direction);
        sigmas.push(-(-clamp_alpha(o.alpha)).ln_1p() / d);
        colors.push(o.color);
    }
    let weights = density_weights(&sigmas, &deltas)?;
    Ok(RayRenderResult {
        color: composite(&weights, &colors, background),
        weights,
        depths: depths.to_vec(),
        hit: None,
        queries_used: depths.len(),
    })
}

pub fn render_surface_only(field: &dyn SceneField, ray: &Ray, config: &RenderConfig) -> RayRenderResult {
    let hit = locate_surface(field, ray, &config.root);
    if hit.found {
        RayRenderResult {
            color: field.color(&ray.at(hit.t_s), &ray.direction),
            weights: vec![1.0],
            depths: vec![hit.t_s],
            hit: Some(hit),
            queries_used: hit.queries_used + 1,
        }
    } else {
        RayRenderResult {
            color: config.background,
            weights: Vec::new(),
            depths: Vec::new(),
            hit: Some(hit),
            queries_used: hit.queries_used,
        }
    }
}

/// Sample depths for a cumulative render. With `delta`, the surface is
/// located first and samples are stratified in `[t_s - delta, t_s + delta]`;
/// rays without a crossing fall back to the whole volume.
pub fn cumulative_depths<R: Rng + ?Sized>(
    field: &dyn SceneField,
    ray: &Ray,
    config: &RenderConfig,
    delta: Option<f64>,
    rng: &mut R,
) -> Result<(Vec<f64>, Option<SurfaceHit>, usize)> {
    let mut queries = 0;
    let mut hit = None;
    let (mut lo, mut hi) = (ray.t_near, ray.t_far);
    if let Some(delta) = delta {
        let h = locate_surface(field, ray, &config.root);
        queries += h.queries_used;
        if h.found {
            (lo, hi) = shrink_window(ray, h.t_s, delta);
        }
        hit = Some(h);
    }
    let window = Ray { t_near: lo, t_far: hi, ..*ray };
    let mut depths = stratified_samples(&window, config.samples, rng);
    if config.fine_samples > 0 {
        let alphas: Vec<f64> = depths.iter().map(|t| field.alpha(&ray.at(*t))).collect();
        queries += depths.len();
        let w = alpha_weights(&alphas, false);
        depths = hierarchical_fine_samples(&depths, &w, config.fine_samples, (lo, hi), rng)?;
    }
    Ok((depths, hit, queries))
}

/// Render one ray in the configured mode.
pub fn render_ray<R: Rng + ?Sized>(
    field: &dyn SceneField,
    ray: &Ray,
    config: &RenderConfig,
    delta: Option<f64>,
    rng: &mut R,
) -> Result<RayRenderResult> {
    if config.mode == RenderMode::SurfaceOnly {
        return Ok(render_surface_only(field, ray, config));
    }
    let (depths, hit, extra) = cumulative_depths(field, ray, config, delta, rng)?;
    let mut r = match config.mode {
        RenderMode::AlphaCumulative => {
            render_alpha_cumulative(field, ray, &depths, config.normalize_weights, config.background)
        }
        _ => render_alpha_as_density(field, ray, &depths, config.background)?,
    };
    if config.fine_samples > 0 {
        // Coarse samples were already evaluated.
        r.queries_used -= config.samples;
    }
    r.queries_used += extra;
    r.hit = hit;
    Ok(r)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RenderDiagnostics {
    pub mode: RenderMode,
    pub width: usize,
    pub height: usize,
    pub mean_queries: f64,
    pub surface_hits: usize,
    /// Image mean of the weighted depth variance over rays where it is
    /// defined (raw value, not rescaled).
    pub mean_depth_variance: Option<f64>,
    pub undefined_concentration_rays: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub psnr_vs_reference: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct RenderOutput {
    pub image: Image,
    pub rays: Vec<RayRenderResult>,
    pub diagnostics: RenderDiagnostics,
}

/// Random stream identity for an image render.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct RenderSeed {
    pub seed: u64,
    pub image: u64,
    pub pass: u64,
}

/// Render every pixel of `camera` in parallel. Pixel `p` draws from its own
/// random stream, so the result does not depend on the thread count.
pub fn render_image(
    field: &dyn SceneField,
    camera: &Camera,
    bounds: (f64, f64),
    config: &RenderConfig,
    delta: Option<f64>,
    seed: RenderSeed,
) -> Result<RenderOutput> {
    config.validate()?;
    let rays = generate_rays(camera, bounds.0, bounds.1)?;
    let results: Vec<Result<RayRenderResult>> = rays
        .par_iter()
        .enumerate()
        .map(|(p, ray)| {
            let mut rng = pixel_rng(seed.seed, seed.image, seed.pass, p as u64);
            let r = render_ray(field, ray, config, delta, &mut rng)?;
            if r.color.iter().any(|c| !c.is_finite()) {
                return Err(Error::Numeric {
                    what: format!("color at pixel ({}, {})", p % camera.width, p / camera.width),
                });
            }
            Ok(r)
        })
        .collect();
    let results = results.into_iter().collect::<Result<Vec<_>>>()?;

    let mut queries = 0usize;
    let mut hits = 0;
    let mut var_sum = 0.0;
    let mut var_count = 0usize;
    let mut undefined = 0;
    for r in &results {
        queries += r.queries_used;
        hits += r.hit.is_some_and(|h| h.found) as usize;
        match depth_variance(&r.weights, &r.depths) {
            Ok(v) => {
                var_sum += v;
                var_count += 1;
            }
            Err(_) => undefined += 1,
        }
    }
    let image = Image::from_pixels(camera.width, camera.height, results.iter().map(|r| r.color).collect())?;
    let diagnostics = RenderDiagnostics {
        mode: config.mode,
        width: camera.width,
        height: camera.height,
        mean_queries: queries as f64 / results.len() as f64,
        surface_hits: hits,
        mean_depth_variance: (var_count > 0).then(|| var_sum / var_count as f64),
        undefined_concentration_rays: undefined,
        psnr_vs_reference: None,
    };
    Ok(RenderOutput {
        image,
        rays: results,
        diagnostics,
    })
}

/// Outward unit normal at the located surface, `-grad alpha / |grad alpha|`,
/// encoded as `(n + 1) / 2`. Misses and degenerate gradients are mid-grey.
pub fn render_normal_map(
    field: &dyn SceneField,
    camera: &Camera,
    bounds: (f64, f64),
    root: &RootFinder,
) -> Result<Image> {
    root.validate()?;
    let rays = generate_rays(camera, bounds.0, bounds.1)?;
    let pixels: Vec<[f64; 3]> = rays
        .par_iter()
        .map(|ray| {
            let hit = locate_surface(field, ray, root);
            if !hit.found {
                return [0.5; 3];
            }
            match field.alpha_gradient(&ray.at(hit.t_s)) {
                Ok(g) => {
                    let n = -g.normalize();
                    [(n.x + 1.0) / 2.0, (n.y + 1.0) / 2.0, (n.z + 1.0) / 2.0]
                }
                Err(_) => [0.5; 3],
            }
        })
        .collect();
    Image::from_pixels(camera.width, camera.height, pixels)
}
