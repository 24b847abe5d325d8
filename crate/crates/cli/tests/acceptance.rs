//! End-to-end acceptance checks. Each criterion prints one PASS/FAIL line
//! with its measurements; the test fails if any criterion does.

use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use occufield::autodiff::Tape;
use occufield::field::{AnalyticField, ColorModel, FieldOutput, SceneField, Shape};
use occufield::loss::r1_penalty;
use occufield::metrics::depth_variance;
use occufield::render::{alpha_weights, clamp_alpha, render_alpha_as_density, render_alpha_cumulative};
use occufield::rootfind::BudgetMode;
use occufield::sampling::{stratified_samples, Ray};
use occufield::{Result, Vec3};
use occufield_cli::commands::{cmd_budget, cmd_extract};
use occufield_cli::config::SceneConfig;
use occufield_cli::fit::{fit, FitOptions};
use occufield_cli::verify::{cmd_verify, Suite};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = std::result::Result<String, String>;

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn scene(name: &str) -> SceneConfig {
    SceneConfig::load(&configs().join(name)).unwrap()
}

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn query_budgets() -> Outcome {
    let rows = cmd_budget(12, 3, 12).map_err(|e| e.to_string())?;
    let expected = [(BudgetMode::Cumulative, 27), (BudgetMode::SurfaceOnly, 16), (BudgetMode::HierarchicalBaseline, 24)];
    let got: Vec<usize> = rows.iter().map(|r| r.1).collect();
    check(rows == expected, format!("queries {got:?}"))
}

fn schedule_fidelity() -> Outcome {
    let config = SceneConfig::from_json(
        r#"{"preset":"bfm","field":{"analytic":{"shape":{"sphere":{"center":[0,0,0],"radius":0.07}},"sharpness":200.0,"color":{"constant":[1,1,1]}}}}"#,
    )
    .map_err(|e| e.to_string())?;
    let s = config.shrink_schedule().map_err(|e| e.to_string())?;
    let floor = (12f64.ln() / 4.0e-5).ceil() as u64;
    let mut ok = (s.delta(0) - 0.12).abs() <= 1e-15 && s.gamma == 4.0e-5 && config.bounds() == (0.88, 1.12);
    ok &= s.delta(floor - 1) > 0.01 && (s.delta(floor) - 0.01).abs() <= 1e-15;
    ok &= s.floor_step() == Some(floor);
    ok &= [floor + 1, 100_000, 1_000_000, u64::MAX / 2].iter().all(|n| s.delta(*n) == 0.01);
    let mut last = f64::INFINITY;
    for n in (0..=floor + 1000).step_by(97) {
        ok &= s.delta(n) <= last;
        last = s.delta(n);
    }
    check(ok, format!("delta(0)={} floor step {floor} (delta {:.3e} before, {} at)", s.delta(0), s.delta(floor - 1), s.delta(floor)))
}

fn root_finding() -> Outcome {
    let mut details = Vec::new();
    let mut ok = true;
    for name in ["sphere.json", "box.json"] {
        let config = scene(name);
        let root = config.render.root;
        ok &= root.bins == 12 && root.secant_steps == 3 && root.tau == 0.5;
        let report = cmd_verify(&config, Suite::Rootfind, None).map_err(|e| e.to_string())?;
        let s = &report.suites[0].summary;
        ok &= report.passed && s["checked"].as_u64() == Some(1000);
        details.push(format!(
            "{name}: {} rays max err {:.2e}, secant max err {:.1e}",
            s["checked"], s["max_abs_error"].as_f64().unwrap_or(f64::NAN), s["affine_ramp_max_error"].as_f64().unwrap_or(f64::NAN)
        ));
    }
    check(ok, details.join("; "))
}

fn equivalence_bound() -> Outcome {
    let report = cmd_verify(&scene("neural.json"), Suite::Equivalence, None).map_err(|e| e.to_string())?;
    let s = &report.suites[0].summary;
    let rows: Vec<String> = s["rows"]
        .as_array()
        .map(|rows| {
            rows.iter()
                .map(|r| {
                    let max = r["observed_max_diff"].as_array().unwrap().iter().map(|v| v.as_f64().unwrap()).fold(0.0, f64::max);
                    format!("delta {} max diff {max:.3e} bound {:.3e}", r["delta_min"], r["bound"][0].as_f64().unwrap_or(f64::NAN))
                })
                .collect()
        })
        .unwrap_or_default();
    let hits = s["rows"][0]["rays_hit"].as_u64().unwrap_or(0);
    check(
        report.passed && s["rays"] == 1000 && hits > 0,
        format!("{hits} hits; {}; monotone {}; {} violations", rows.join(", "), s["monotone"], report.suites[0].failures.len()),
    )
}

/// Field with affine alpha and color along z, for matched-sample renders.
struct Slab;

impl SceneField for Slab {
    fn alpha(&self, x: &Vec3) -> f64 {
        (0.5 + 4.0 * x.z).clamp(0.0, 1.0)
    }

    fn output(&self, x: &Vec3, _d: &Vec3) -> FieldOutput {
        FieldOutput {
            alpha: self.alpha(x),
            color: [x.x.abs().min(1.0), 0.5 + x.z, 0.25],
        }
    }

    fn raw_alpha_gradient(&self, _x: &Vec3) -> Result<Vec3> {
        Ok(Vec3::new(0.0, 0.0, 4.0))
    }
}

fn compositing_identities() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut telescope: f64 = 0.0;
    let mut normalized: f64 = 0.0;
    for _ in 0..100_000 {
        let n = rng.random_range(1..=48);
        let alphas: Vec<f64> = (0..n)
            .map(|_| match rng.random_range(0..4) {
                0 => 0.0,
                1 => 1.0,
                _ => rng.random(),
            })
            .collect();
        let w = alpha_weights(&alphas, false);
        let t: f64 = alphas.iter().map(|a| 1.0 - clamp_alpha(*a)).product();
        telescope = telescope.max((w.iter().sum::<f64>() + t - 1.0).abs());
        let wn = alpha_weights(&alphas, true);
        normalized = normalized.max((wn.iter().sum::<f64>() - 1.0).abs());
    }

    let field = AnalyticField {
        shape: Shape::Sphere { center: [0.0; 3], radius: 0.07 },
        sharpness: 200.0,
        color: ColorModel::Constant([0.3, 0.6, 0.9]),
    };
    let mut modes: f64 = 0.0;
    for i in 0..2000 {
        let origin = Vec3::new(rng.random_range(-0.08..0.08), rng.random_range(-0.08..0.08), 1.0);
        let ray = Ray::new(origin, Vec3::new(0.0, 0.0, -1.0), 0.88, 1.12).map_err(|e| e.to_string())?;
        let depths = stratified_samples(&ray, 12 + i % 24, &mut rng);
        let scenes: [&dyn SceneField; 2] = [&field, &Slab];
        for f in scenes {
            let a = render_alpha_cumulative(f, &ray, &depths, false, [1.0; 3]);
            let d = render_alpha_as_density(f, &ray, &depths, [1.0; 3]).map_err(|e| e.to_string())?;
            for k in 0..3 {
                modes = modes.max((a.color[k] - d.color[k]).abs());
            }
            for (p, q) in a.weights.iter().zip(&d.weights) {
                modes = modes.max((p - q).abs());
            }
        }
    }
    check(
        telescope <= 1e-12 && modes <= 1e-12 && normalized == 0.0,
        format!("telescoping {telescope:.1e}, density vs alpha {modes:.1e}, normalized sum error {normalized:.1e}"),
    )
}

fn gradient_correctness() -> Outcome {
    let report = cmd_verify(&scene("sphere.json"), Suite::Gradients, None).map_err(|e| e.to_string())?;
    let s = &report.suites[0].summary;
    let probes = s["probes"].as_u64().unwrap_or(0);
    let worst = s["max_rel_err"].as_f64().unwrap_or(f64::NAN);

    let w = [0.7, -1.3, 0.4, 2.1, -0.6];
    let input = [0.2, -0.5, 0.9, 0.1, -0.3];
    let r1 = r1_penalty(
        |tape: &mut Tape<'static>, x| {
            let wv = tape.constant(&w);
            let z = tape.mul(x, wv);
            let s = tape.sin(z);
            tape.sum(s)
        },
        &input,
        10.0,
    )
    .map_err(|e| e.to_string())?;
    let disc = |v: &[f64]| v.iter().zip(&w).map(|(a, b)| (a * b).sin()).sum::<f64>();
    let h = 1e-4;
    let sq: f64 = (0..input.len())
        .map(|k| {
            let at = |d: f64| {
                let mut v = input;
                v[k] += d;
                disc(&v)
            };
            ((8.0 * (at(h) - at(-h)) - (at(2.0 * h) - at(-2.0 * h))) / (12.0 * h)).powi(2)
        })
        .sum();
    let r1_err = (r1 - 10.0 * sq).abs() / r1;
    check(
        report.passed && probes >= 500 && worst < 1e-4 && r1_err < 1e-4,
        format!("{probes} probes, max relative error {worst:.2e}; R1 relative error {r1_err:.1e}"),
    )
}

fn shrink_fit() -> Outcome {
    let config = scene("sphere_fit.json");
    let run = |shrink: bool| {
        fit(&config, &FitOptions { steps: 2000, views: Some(24), shrink }, |_| {})
            .map(|o| o.report.final_eval)
            .map_err(|e| e.to_string())
    };
    let s = run(true)?;
    let n = run(false)?;
    let (Some(ss), Some(ns)) = (s.sigma_ti, n.sigma_ti) else {
        return Err(format!("undefined concentration: shrink {s:?}, no-shrink {n:?}"));
    };
    check(
        ss < ns && s.surface_psnr >= 35.0 && n.surface_psnr < s.surface_psnr,
        format!(
            "sigma_ti {ss:.3e} vs {ns:.3e}; cumulative vs surface PSNR {:.2} dB vs {:.2} dB; reference PSNR {:.2} vs {:.2} dB",
            s.surface_psnr, n.surface_psnr, s.psnr, n.psnr
        ),
    )
}

fn metric_formula() -> Outcome {
    let mut depths: Vec<f64> = (0..36).map(|i| 0.88 + 0.24 * i as f64 / 35.0).collect();
    let mut weights = vec![0.0; 36];
    depths[3] = 0.9;
    depths[32] = 1.1;
    weights[3] = 0.5;
    weights[32] = 0.5;
    let v = depth_variance(&weights, &depths).map_err(|e| e.to_string())?;
    let exact = 36.0 / 35.0 * 0.01;
    check(
        (v - exact).abs() <= 1e-9 && format!("{v:.7}") == "0.0102857",
        format!("depth variance {v:.12} (exact {exact:.12})"),
    )
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut reference: Option<Vec<u8>> = None;
    let mut renders = 0;
    for config in ["sphere.json", "neural.json"] {
        reference = None;
        for threads in ["1", "4", "8"] {
            for run in 0..3 {
                let out = dir.path().join(format!("{threads}_{run}.ppm"));
                let status = Command::new(env!("CARGO_BIN_EXE_occufield"))
                    .args(["--threads", threads, "render", "--config"])
                    .arg(configs().join(config))
                    .arg("--out")
                    .arg(&out)
                    .arg("--diagnostics")
                    .arg(dir.path().join("diag.json"))
                    .env_remove("OCCUFIELD_THREADS")
                    .status()
                    .map_err(|e| e.to_string())?;
                if !status.success() {
                    return Err(format!("render exited with {status}"));
                }
                let bytes = std::fs::read(&out).map_err(|e| e.to_string())?;
                renders += 1;
                match &reference {
                    None => reference = Some(bytes),
                    Some(r) if *r != bytes => return Err(format!("{config}: {threads} threads run {run} differs")),
                    Some(_) => {}
                }
            }
        }
    }
    check(reference.is_some(), format!("{renders} renders byte-identical across 1, 4 and 8 threads"))
}

fn mesh_sanity() -> Outcome {
    let config = scene("sphere.json");
    let mesh = cmd_extract(&config, 64, None).map_err(|e| e.to_string())?;
    let Shape::Sphere { center, radius } = (match &config.field {
        occufield_cli::config::FieldSpec::Analytic(a) => a.shape.clone(),
        _ => return Err("sphere scene is not analytic".into()),
    }) else {
        return Err("sphere scene has another shape".into());
    };
    let c = Vec3::from(center);
    let cell = (config.bounds[1] - config.bounds[0]) / 64.0;
    let err = mesh.vertices.iter().map(|v| ((v - c).norm() - radius).abs()).sum::<f64>() / mesh.vertices.len().max(1) as f64;
    let chi = mesh.euler_characteristic();
    check(
        !mesh.is_empty() && err < 2.0 * cell && chi == 2,
        format!("{} triangles, mean radius error {:.3} cells, Euler characteristic {chi}", mesh.triangles.len(), err / cell),
    )
}

#[test]
fn acceptance() {
    let criteria: [(&str, fn() -> Outcome, u64); 10] = [
        ("query budgets", query_budgets, 1),
        ("schedule fidelity", schedule_fidelity, 1),
        ("root-finding accuracy", root_finding, 10),
        ("equivalence bound", equivalence_bound, 30),
        ("compositing identities", compositing_identities, 30),
        ("gradient correctness", gradient_correctness, 60),
        ("shrink-fit concentration", shrink_fit, 900),
        ("metric formula", metric_formula, 1),
        ("determinism", determinism, 60),
        ("mesh sanity", mesh_sanity, 30),
    ];
    let mut failed = Vec::new();
    for (i, (name, run, budget)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let outcome = run();
        let elapsed = start.elapsed();
        let slow = elapsed > Duration::from_secs(*budget);
        let (status, detail) = match &outcome {
            Ok(d) if !slow => ("PASS", d.clone()),
            Ok(d) => ("FAIL", format!("{d}; over the {budget} s budget")),
            Err(d) => ("FAIL", d.clone()),
        };
        println!("criterion {:>2} {status} {name} ({:.2} s): {detail}", i + 1, elapsed.as_secs_f64());
        if status == "FAIL" {
            failed.push(i + 1);
        }
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
