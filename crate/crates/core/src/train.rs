//! Photometric fitting objective for a [`FilmSirenField`] and its parameter
//! gradient.
//!
//! The mapping network is recorded once per batch. Each ray gets its own
//! tape whose conditioning is an input leaf; the conditioning adjoints of all
//! rays are summed in ray order and pushed back through the mapping tape.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::field::FilmSirenField;
use crate::loss::{opacity_regularizer, tape_normal_difference, tape_opacity, LossWeights};
use crate::render::{alpha_weights, composite, tape_alpha_composite};
use crate::sampling::Ray;
use crate::{Error, Result, Vec3};

/// Rays per gradient chunk; chunks are reduced in order.
const CHUNK: usize = 16;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainRay {
    pub ray: Ray,
    pub depths: Vec<f64>,
    pub target: [f64; 3],
    /// Extra depths that enter only the opacity term.
    pub scan: Vec<f64>,
    /// Located surface point and its perturbation for the normal term.
    pub surface: Option<(Vec3, Vec3)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainSettings {
    /// Weight of the reconstruction term (1 for fitting).
    pub lambda_reconstruction: f64,
    pub normalize_weights: bool,
    pub background: [f64; 3],
    pub weights: LossWeights,
    pub step: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct BatchLoss {
    /// Mean squared color error over rays and channels.
    pub reconstruction: f64,
    /// Mean normal difference per ray (rays without a usable surface point
    /// contribute zero).
    pub normal: f64,
    /// Opacity term averaged over every sample and scan depth in the batch.
    pub opacity: f64,
    pub total: f64,
    pub normal_points: usize,
    pub normal_skipped: usize,
}

impl BatchLoss {
    fn finish(mut self, lambda_rec: f64, w: &LossWeights, step: u64) -> Self {
        self.total = self.reconstruction * lambda_rec + w.lambda_normal * self.normal + w.lambda_opacity(step) * self.opacity;
        self
    }
}

fn check_batch(rays: &[TrainRay]) -> Result<()> {
    if rays.is_empty() {
        return Err(Error::Config("empty training batch".into()));
    }
    if rays.iter().any(|r| r.depths.is_empty()) {
        return Err(Error::Config("training ray without samples".into()));
    }
    Ok(())
}

/// Loss value by plain forward evaluation.
pub fn batch_value(
    field: &FilmSirenField,
    latent: &[f64],
    rays: &[TrainRay],
    settings: &TrainSettings,
) -> Result<BatchLoss> {
    check_batch(rays)?;
    let cond = field.condition(latent)?;
    let b = rays.len() as f64;
    let total_samples: usize = rays.iter().map(|r| r.depths.len() + r.scan.len()).sum();
    let mut out = BatchLoss::default();
    let mut all_alphas = Vec::with_capacity(total_samples);
    for r in rays {
        let (alphas, colors): (Vec<f64>, Vec<[f64; 3]>) = r
            .depths
            .iter()
            .map(|t| {
                let o = field.output_with(&cond, &r.ray.at(*t), &r.ray.direction);
                (o.alpha, o.color)
            })
            .unzip();
        let c = composite(
            &alpha_weights(&alphas, settings.normalize_weights),
            &colors,
            if settings.normalize_weights { [0.0; 3] } else { settings.background },
        );
        out.reconstruction += (0..3).map(|k| (c[k] - r.target[k]).powi(2)).sum::<f64>() / (3.0 * b);
        all_alphas.extend(alphas);
        all_alphas.extend(r.scan.iter().map(|t| field.alpha_with(&cond, &r.ray.at(*t))));
        if let Some((x, eps)) = r.surface {
            let a = field.alpha_gradient_with(&cond, &x)?;
            let g = field.alpha_gradient_with(&cond, &(x + eps))?;
            let (na, ng) = (a.norm(), g.norm());
            if na >= crate::field::DEGENERATE_GRADIENT && ng >= crate::field::DEGENERATE_GRADIENT {
                out.normal += (a / na - g / ng).norm() / b;
                out.normal_points += 1;
            } else {
                out.normal_skipped += 1;
            }
        }
    }
    out.opacity = opacity_regularizer(&all_alphas);
    Ok(out.finish(settings.lambda_reconstruction, &settings.weights, settings.step))
}

/// Loss value and its gradient with respect to every network parameter,
/// accumulated into `grads` (which is overwritten).
pub fn batch_gradient(
    field: &FilmSirenField,
    latent: &[f64],
    rays: &[TrainRay],
    settings: &TrainSettings,
    grads: &mut [f64],
) -> Result<BatchLoss> {
    check_batch(rays)?;
    let params = field.params();
    if grads.len() != params.len() {
        return Err(Error::DimensionMismatch {
            expected: params.len(),
            found: grads.len(),
        });
    }
    let mut mapping = Tape::new(params);
    let cond_var = field.tape_mapping(&mut mapping, latent)?;
    let cond = mapping.value(cond_var).to_vec();

    let b = rays.len() as f64;
    let total_samples: usize = rays.iter().map(|r| r.depths.len() + r.scan.len()).sum();
    let w = settings.weights;
    let lambda_opac = w.lambda_opacity(settings.step);
    let background = if settings.normalize_weights { [0.0; 3] } else { settings.background };

    struct Partial {
        grads: Vec<f64>,
        cond_adj: Vec<f64>,
        loss: BatchLoss,
        opacity_sum: f64,
    }

    let partials: Vec<Result<Partial>> = rays
        .par_chunks(CHUNK)
        .map(|chunk| {
            let mut p = Partial {
                grads: vec![0.0; params.len()],
                cond_adj: vec![0.0; cond.len()],
                loss: BatchLoss::default(),
                opacity_sum: 0.0,
            };
            for r in chunk {
                let mut tape = Tape::new(params);
                let c = tape.input(&cond);
                let tc = field.tape_conditioning(&mut tape, c);
                let mut alphas = Vec::with_capacity(r.depths.len());
                let mut colors = Vec::with_capacity(r.depths.len());
                for t in &r.depths {
                    let x = r.ray.at(*t);
                    let xv = tape.constant(&[x.x, x.y, x.z]);
                    let pv = field.tape_point(&mut tape, &tc, xv, &r.ray.direction, false);
                    alphas.push(pv.alpha);
                    colors.push(pv.color);
                }
                let (color, _) =
                    tape_alpha_composite(&mut tape, &alphas, &colors, settings.normalize_weights, background);
                let target = tape.constant(&r.target);
                let err = tape.sub(color, target);
                let sq = tape.square(err);
                let sq = tape.sum(sq);
                let recon = tape.scale(sq, 1.0 / (3.0 * b));
                p.loss.reconstruction += tape.value(recon)[0];
                let recon = tape.scale(recon, settings.lambda_reconstruction);

                for t in &r.scan {
                    let x = r.ray.at(*t);
                    let xv = tape.constant(&[x.x, x.y, x.z]);
                    alphas.push(field.tape_point(&mut tape, &tc, xv, &r.ray.direction, false).alpha);
                }
                let count = alphas.len() as f64;
                let all = tape.concat(&alphas);
                let opac = tape_opacity(&mut tape, all);
                p.opacity_sum += tape.value(opac)[0] * count;
                // Per-ray mean rescaled to a mean over the whole batch.
                let opac = tape.scale(opac, lambda_opac * count / total_samples as f64);
                let mut total = tape.add(recon, opac);

                if let Some((x, eps)) = r.surface {
                    match tape_normal_difference(field, &mut tape, &tc, &x, &eps) {
                        Some(d) => {
                            p.loss.normal += tape.value(d)[0] / b;
                            p.loss.normal_points += 1;
                            let d = tape.scale(d, w.lambda_normal / b);
                            total = tape.add(total, d);
                        }
                        None => p.loss.normal_skipped += 1,
                    }
                }
                let adj = tape.backward_into(total, &[1.0], &mut p.grads)?;
                for (a, g) in p.cond_adj.iter_mut().zip(adj.wrt(c)) {
                    *a += g;
                }
            }
            Ok(p)
        })
        .collect();

    grads.fill(0.0);
    let mut cond_adj = vec![0.0; cond.len()];
    let mut loss = BatchLoss::default();
    let mut opacity_sum = 0.0;
    for p in partials {
        let p = p?;
        for (g, v) in grads.iter_mut().zip(&p.grads) {
            *g += v;
        }
        for (a, v) in cond_adj.iter_mut().zip(&p.cond_adj) {
            *a += v;
        }
        loss.reconstruction += p.loss.reconstruction;
        loss.normal += p.loss.normal;
        loss.normal_points += p.loss.normal_points;
        loss.normal_skipped += p.loss.normal_skipped;
        opacity_sum += p.opacity_sum;
    }
    mapping.backward_into(cond_var, &cond_adj, grads)?;
    loss.opacity = opacity_sum / total_samples as f64;
    Ok(loss.finish(settings.lambda_reconstruction, &w, settings.step))
}

/// Which scalar a gradient check differentiates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Probe {
    Alpha { x: Vec3 },
    Color { x: Vec3, d: Vec3, channel: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub name: String,
    pub probes: usize,
    pub max_rel_err: f64,
    pub worst_param: usize,
}

/// Denominator floor of the relative error.
pub const REL_ERR_FLOOR: f64 = 1e-7;

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_ERR_FLOOR)
}

/// Fourth-order central differences
/// `(f(p - 2h) - 8 f(p - h) + 8 f(p + h) - f(p + 2h)) / 12h` at each index.
fn central_differences(
    field: &mut FilmSirenField,
    indices: &[usize],
    h: f64,
    mut f: impl FnMut(&FilmSirenField) -> Result<f64>,
) -> Result<Vec<f64>> {
    indices
        .iter()
        .map(|&i| {
            let p0 = field.params()[i];
            let mut at = |offset: f64| {
                field.params_mut()[i] = p0 + offset;
                let v = f(field);
                field.params_mut()[i] = p0;
                v
            };
            let (m2, m1, p1, p2) = (at(-2.0 * h)?, at(-h)?, at(h)?, at(2.0 * h)?);
            Ok((8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * h))
        })
        .collect()
}

fn report(name: &str, analytic: &[f64], numeric: &[f64], indices: &[usize]) -> GradCheckReport {
    let mut worst = (0.0, 0);
    for ((a, n), i) in analytic.iter().zip(numeric).zip(indices) {
        let e = rel_err(*a, *n);
        if e > worst.0 || !e.is_finite() {
            worst = (e, *i);
        }
    }
    GradCheckReport {
        name: name.to_string(),
        probes: indices.len(),
        max_rel_err: worst.0,
        worst_param: worst.1,
    }
}

/// Tape gradient of a network output against central differences of the
/// plain forward pass.
pub fn check_output_gradient(
    field: &mut FilmSirenField,
    latent: &[f64],
    probe: Probe,
    indices: &[usize],
    h: f64,
) -> Result<GradCheckReport> {
    let analytic = {
        let mut tape = Tape::new(field.params());
        let c = field.tape_mapping(&mut tape, latent)?;
        let tc = field.tape_conditioning(&mut tape, c);
        let (x, d) = match probe {
            Probe::Alpha { x } => (x, Vec3::z()),
            Probe::Color { x, d, .. } => (x, d),
        };
        let xv = tape.constant(&[x.x, x.y, x.z]);
        let pv = field.tape_point(&mut tape, &tc, xv, &d, false);
        let out = match probe {
            Probe::Alpha { .. } => pv.alpha,
            Probe::Color { channel, .. } => tape.slice(pv.color, channel, 1),
        };
        let out = tape.scalar(out)?;
        let g = tape.backward(out)?;
        indices.iter().map(|&i| g.params[i]).collect::<Vec<_>>()
    };
    let numeric = central_differences(field, indices, h, |f| {
        let cond = f.condition(latent)?;
        Ok(match probe {
            Probe::Alpha { x } => f.alpha_with(&cond, &x),
            Probe::Color { x, d, channel } => f.output_with(&cond, &x, &d).color[channel],
        })
    })?;
    let name = match probe {
        Probe::Alpha { .. } => "alpha".to_string(),
        Probe::Color { channel, .. } => format!("color[{channel}]"),
    };
    Ok(report(&name, &analytic, &numeric, indices))
}

/// [`batch_gradient`] against central differences of [`batch_value`].
pub fn check_loss_gradient(
    name: &str,
    field: &mut FilmSirenField,
    latent: &[f64],
    rays: &[TrainRay],
    settings: &TrainSettings,
    indices: &[usize],
    h: f64,
) -> Result<GradCheckReport> {
    let mut grads = vec![0.0; field.params().len()];
    batch_gradient(field, latent, rays, settings, &mut grads)?;
    let analytic: Vec<f64> = indices.iter().map(|&i| grads[i]).collect();
    let numeric = central_differences(field, indices, h, |f| Ok(batch_value(f, latent, rays, settings)?.total))?;
    Ok(report(name, &analytic, &numeric, indices))
}

/// `count` distinct parameter indices: every backbone and head parameter
/// when they fit, the rest drawn from the mapping network.
pub fn probe_indices(field: &FilmSirenField, count: usize, seed: u64) -> Vec<usize> {
    use rand::{seq::index::sample, SeedableRng};
    let layout = field.layout();
    let mapping_end = layout.backbone[0].weight;
    let total = layout.total;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let tail: Vec<usize> = (mapping_end..total).collect();
    let mut out: Vec<usize> = if tail.len() >= count {
        sample(&mut rng, tail.len(), count).into_iter().map(|k| tail[k]).collect()
    } else {
        let rest = (count - tail.len()).min(mapping_end);
        let mut v = tail;
        v.extend(sample(&mut rng, mapping_end, rest));
        v
    };
    out.sort_unstable();
    out
}
