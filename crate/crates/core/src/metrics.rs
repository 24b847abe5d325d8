//! Surface concentration, depth and image-quality metrics, and the
//! cumulative versus surface-only equivalence report.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::field::SceneField;
use crate::image::Image;
use crate::render::{alpha_weights, composite, density_weights, sample_deltas};
use crate::rootfind::{locate_surface, RootFinder};
use crate::sampling::{pixel_rng, shrink_window, stratified_samples, uniform_depths, Ray};
use crate::{Error, Result};

/// Sum of weights below which the concentration is undefined.
pub const MIN_WEIGHT_SUM: f64 = 1e-12;
/// Absolute rounding allowance when checking the equivalence bound.
pub const BOUND_SLACK: f64 = 1e-12;
/// PSNR reported for identical images.
pub const PSNR_IDENTICAL: f64 = 99.0;

/// Weighted depth variance `N / ((N - 1) sum w) * sum w (t - t_bar)^2`
/// with `t_bar = sum w t / sum w`.
pub fn depth_variance(weights: &[f64], depths: &[f64]) -> Result<f64> {
    if weights.len() != depths.len() {
        return Err(Error::DimensionMismatch {
            expected: weights.len(),
            found: depths.len(),
        });
    }
    let n = weights.len();
    let total: f64 = weights.iter().sum();
    if n < 2 || !(total > MIN_WEIGHT_SUM) {
        return Err(Error::UndefinedConcentration(total));
    }
    let mean = weights.iter().zip(depths).map(|(w, t)| w * t).sum::<f64>() / total;
    let spread: f64 = weights.iter().zip(depths).map(|(w, t)| w * (t - mean).powi(2)).sum();
    Ok(n as f64 / ((n - 1) as f64 * total) * spread)
}

/// Expected depth under density compositing weights.
pub fn weighted_depth(densities: &[f64], depths: &[f64], t_near: f64, t_far: f64) -> Result<f64> {
    if densities.len() != depths.len() {
        return Err(Error::DimensionMismatch {
            expected: densities.len(),
            found: depths.len(),
        });
    }
    if densities.iter().all(|s| *s == 0.0) {
        return Err(Error::UndefinedDepth);
    }
    let w = density_weights(densities, &sample_deltas(depths, t_near, t_far))?;
    let total: f64 = w.iter().sum();
    if !(total > 0.0) {
        return Err(Error::UndefinedDepth);
    }
    Ok(w.iter().zip(depths).map(|(w, t)| w * t).sum::<f64>() / total)
}

/// `10 log10(1 / MSE)`; identical images give [`PSNR_IDENTICAL`].
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    let mse = crate::loss::reconstruction_loss(a, b)?;
    if mse == 0.0 {
        return Ok(PSNR_IDENTICAL);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_IDENTICAL))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConcentrationReport {
    /// Per-ray variance, `None` where undefined.
    pub per_ray: Vec<Option<f64>>,
    /// Mean over rays with a defined value.
    pub mean: Option<f64>,
    pub samples: usize,
    pub span: (f64, f64),
    pub undefined: usize,
}

impl ConcentrationReport {
    pub fn from_values(per_ray: Vec<Option<f64>>, samples: usize, span: (f64, f64)) -> Self {
        let defined: Vec<f64> = per_ray.iter().flatten().copied().collect();
        let mean = (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64);
        ConcentrationReport {
            undefined: per_ray.len() - defined.len(),
            per_ray,
            mean,
            samples,
            span,
        }
    }
}

/// Depth variance of alpha-compositing weights at `samples` equally spaced
/// depths spanning each ray.
pub fn concentration_report(field: &dyn SceneField, rays: &[Ray], samples: usize) -> ConcentrationReport {
    let values: Vec<Option<f64>> = rays
        .par_iter()
        .map(|ray| {
            let depths = uniform_depths(ray, samples);
            let alphas: Vec<f64> = depths.iter().map(|t| field.alpha(&ray.at(*t))).collect();
            depth_variance(&alpha_weights(&alphas, false), &depths).ok()
        })
        .collect();
    let span = rays.first().map_or((0.0, 0.0), |r| (r.t_near, r.t_far));
    ConcentrationReport::from_values(values, samples, span)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EquivalenceRow {
    pub delta_min: f64,
    /// Largest per-channel `|C_cumulative - C_surface|` over the rays.
    pub observed_max_diff: [f64; 3],
    /// `2 k_c N delta_min` per channel.
    pub bound: [f64; 3],
    pub violated: bool,
    pub rays_hit: usize,
}

/// Compare the normalized cumulative render inside `[t_s - delta, t_s + delta]`
/// against the surface-only render, for every `delta` in `deltas`. Rays
/// without a surface crossing are left out.
pub fn equivalence_report(
    field: &dyn SceneField,
    rays: &[Ray],
    deltas: &[f64],
    samples: usize,
    root: &RootFinder,
    seed: u64,
) -> Result<Vec<EquivalenceRow>> {
    let k = field.color_lipschitz().ok_or_else(|| Error::Config("field has no certified color Lipschitz bound".into()))?;
    let hits: Vec<_> = rays.par_iter().map(|r| locate_surface(field, r, root)).collect();
    deltas
        .iter()
        .enumerate()
        .map(|(pass, &delta)| {
            let diffs: Vec<[f64; 3]> = rays
                .par_iter()
                .zip(&hits)
                .enumerate()
                .filter(|(_, (_, h))| h.found)
                .map(|(p, (ray, hit))| {
                    let mut rng = pixel_rng(seed, 0, pass as u64, p as u64);
                    let (lo, hi) = shrink_window(ray, hit.t_s, delta);
                    let window = Ray { t_near: lo, t_far: hi, ..*ray };
                    let depths = stratified_samples(&window, samples, &mut rng);
                    let (alphas, colors): (Vec<f64>, Vec<[f64; 3]>) = depths
                        .iter()
                        .map(|t| {
                            let o = field.output(&ray.at(*t), &ray.direction);
                            (o.alpha, o.color)
                        })
                        .unzip();
                    let cumulative = composite(&alpha_weights(&alphas, true), &colors, [0.0; 3]);
                    let surface = field.color(&ray.at(hit.t_s), &ray.direction);
                    std::array::from_fn(|c| (cumulative[c] - surface[c]).abs())
                })
                .collect();
            let mut observed = [0.0f64; 3];
            for d in &diffs {
                for c in 0..3 {
                    observed[c] = observed[c].max(d[c]);
                }
            }
            let bound: [f64; 3] = std::array::from_fn(|c| 2.0 * k[c] * samples as f64 * delta);
            Ok(EquivalenceRow {
                delta_min: delta,
                observed_max_diff: observed,
                violated: (0..3).any(|c| observed[c] > bound[c] + BOUND_SLACK),
                bound,
                rays_hit: diffs.len(),
            })
        })
        .collect()
}

/// CSV with one line per `(delta_min, channel)`.
pub fn equivalence_csv(rows: &[EquivalenceRow]) -> String {
    let mut out = String::from("delta_min,channel,observed_max_diff,bound,violated\n");
    for r in rows {
        for c in 0..3 {
            out.push_str(&format!(
                "{},{},{:e},{:e},{}\n",
                r.delta_min, c, r.observed_max_diff[c], r.bound[c], r.observed_max_diff[c] > r.bound[c] + BOUND_SLACK
            ));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::{AnalyticField, ColorModel, Shape};
    use crate::Vec3;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn two_spike_example() {
        let n = 36;
        let mut w = vec![0.0; n];
        let mut t: Vec<f64> = (0..n).map(|i| 0.88 + i as f64 * 0.24 / 35.0).collect();
        w[3] = 0.5;
        t[3] = 0.9;
        w[30] = 0.5;
        t[30] = 1.1;
        let v = depth_variance(&w, &t).unwrap();
        // sum w (t - 1)^2 = 0.01, times 36/35.
        assert!((v - 0.01 * 36.0 / 35.0).abs() < 1e-15);
    }

    #[test]
    fn single_depth_and_degenerate() {
        assert_eq!(depth_variance(&[0.0, 0.7, 0.0], &[0.9, 1.0, 1.1]).unwrap(), 0.0);
        assert!(matches!(depth_variance(&[0.0; 4], &[1.0; 4]), Err(Error::UndefinedConcentration(_))));
        assert!(depth_variance(&[1.0], &[1.0]).is_err());
    }

    proptest! {
        #[test]
        fn variance_invariances(
            pairs in prop::collection::vec((0.0f64..1.0, 0.5f64..1.5), 2..40),
            scale in 1e-3f64..1e3,
            shift in -1.0f64..1.0,
        ) {
            let (w, t): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
            prop_assume!(w.iter().sum::<f64>() > 1e-6);
            let v = depth_variance(&w, &t).unwrap();
            prop_assert!(v >= 0.0);
            let ws: Vec<f64> = w.iter().map(|x| x * scale).collect();
            prop_assert!((depth_variance(&ws, &t).unwrap() - v).abs() <= 1e-9 * v.max(1e-12));
            let ts: Vec<f64> = t.iter().map(|x| x + shift).collect();
            prop_assert!((depth_variance(&w, &ts).unwrap() - v).abs() <= 1e-9);
        }
    }

    #[test]
    fn weighted_depth_examples() {
        let depths = [0.9, 1.0, 1.1];
        assert!((weighted_depth(&[1e9, 0.0, 0.0], &depths, 0.88, 1.12).unwrap() - 0.9).abs() < 1e-12);
        assert!(matches!(weighted_depth(&[0.0; 3], &depths, 0.88, 1.12), Err(Error::UndefinedDepth)));
        // Two low equal spikes placed symmetrically around 1.0.
        let d5 = [0.9, 0.95, 1.0, 1.05, 1.1];
        let t = weighted_depth(&[0.0, 1e-3, 0.0, 1e-3, 0.0], &d5, 0.88, 1.12).unwrap();
        assert!((t - 1.0).abs() < 1e-5);
    }

    #[test]
    fn weighted_depth_tracks_step_surface() {
        // Density step at 1.0 along the ray; compare with the root finder.
        let n = 4096;
        let depths: Vec<f64> = (0..n).map(|i| 0.88 + 0.24 * (i as f64 + 0.5) / n as f64).collect();
        let sigma: Vec<f64> = depths.iter().map(|t| if *t >= 1.0 { 1e4 } else { 0.0 }).collect();
        let t_bar = weighted_depth(&sigma, &depths, 0.88, 1.12).unwrap();
        let hit = crate::rootfind::locate_on_profile(
            |t| if t >= 1.0 { 1.0 } else { 0.0 },
            0.88,
            1.12,
            &RootFinder::default(),
        );
        assert!((t_bar - hit.t_s).abs() < 0.02);
    }

    #[test]
    fn psnr_examples() {
        let a = Image::new(3, 2, [0.2, 0.4, 0.6]);
        assert_eq!(psnr(&a, &a).unwrap(), 99.0);
        let b = Image::new(3, 2, [0.3, 0.5, 0.7]);
        assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-9);
        assert_eq!(psnr(&Image::new(1, 1, [0.0; 3]), &Image::new(1, 1, [1.0; 3])).unwrap(), 0.0);
        assert!(psnr(&a, &Image::new(2, 2, [0.0; 3])).is_err());
    }

    fn rays_toward(target: Vec3, spread: f64, n: usize, seed: u64) -> Vec<Ray> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let aim = target + Vec3::new(rng.random_range(-spread..spread), rng.random_range(-spread..spread), 0.0);
                let o = Vec3::new(0.0, 0.0, 1.0);
                Ray::new(o, aim - o, 0.88, 1.12).unwrap()
            })
            .collect()
    }

    #[test]
    fn equivalence_constant_color_is_exact() {
        let f = AnalyticField::sphere([0.0; 3], 0.1, 100.0, [0.3, 0.6, 0.9]);
        let rays = rays_toward(Vec3::zeros(), 0.05, 200, 1);
        let rows = equivalence_report(&f, &rays, &[0.1, 0.03, 0.01], 12, &RootFinder::default(), 0).unwrap();
        for r in rows {
            assert!(r.observed_max_diff.iter().all(|d| *d < 1e-15));
            assert!(!r.violated);
            assert!(r.rays_hit > 150);
        }
    }

    #[test]
    fn equivalence_ramp_respects_bound() {
        let f = AnalyticField::new(
            Shape::Sphere { center: [0.0; 3], radius: 0.1 },
            1000.0,
            ColorModel::Ramp { base: [0.5; 3], slope: [[1.0, 0.5, 0.0], [0.0, 2.0, 0.0], [0.3, 0.3, 3.0]] },
        )
        .unwrap();
        let rays = rays_toward(Vec3::zeros(), 0.06, 300, 2);
        let rows = equivalence_report(&f, &rays, &[0.1, 0.03, 0.01], 12, &RootFinder::default(), 0).unwrap();
        for r in &rows {
            assert!(!r.violated, "{r:?}");
        }
        for w in rows.windows(2) {
            for c in 0..3 {
                assert!(w[1].observed_max_diff[c] <= w[0].observed_max_diff[c]);
            }
        }
        let csv = equivalence_csv(&rows);
        assert!(csv.starts_with("delta_min,channel,observed_max_diff,bound,violated\n"));
        assert_eq!(csv.lines().count(), 1 + 9);
    }

    #[test]
    fn concentration_sharp_vs_soft() {
        let rays = rays_toward(Vec3::zeros(), 0.03, 50, 3);
        let sharp = AnalyticField::sphere([0.0; 3], 0.06, 400.0, [1.0; 3]);
        let soft = AnalyticField::sphere([0.0; 3], 0.06, 20.0, [1.0; 3]);
        let a = concentration_report(&sharp, &rays, 36);
        let b = concentration_report(&soft, &rays, 36);
        assert!(a.mean.unwrap() < b.mean.unwrap());
        assert_eq!(a.samples, 36);
        assert_eq!(a.undefined, 0);
    }
}
