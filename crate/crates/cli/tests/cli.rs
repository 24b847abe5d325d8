use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use occufield::field::FilmSirenField;
use occufield::rootfind::BudgetMode;
use occufield_cli::commands::{budget_table, cmd_budget, cmd_extract, cmd_render, cmd_schedule, RenderOptions};
use occufield_cli::config::{FieldSpec, SceneConfig};
use occufield_cli::fit::{clip_gradient, diverged, learning_rate};
use occufield_cli::verify::{cmd_verify, Suite};

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn scene(name: &str) -> SceneConfig {
    SceneConfig::load(&configs().join(name)).unwrap()
}

/// The sample sphere with its surface sharpened well below the narrowest
/// sampling window.
fn sharp_sphere() -> SceneConfig {
    let mut config = scene("sphere.json");
    if let FieldSpec::Analytic(f) = &mut config.field {
        f.sharpness = 2000.0;
    }
    config
}

fn occufield(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_occufield"))
        .args(args)
        .env_remove("OCCUFIELD_THREADS")
        .output()
        .unwrap()
}

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p
}

#[test]
fn budget_rows() {
    let rows = cmd_budget(12, 3, 12).unwrap();
    assert_eq!(
        rows,
        [(BudgetMode::Cumulative, 27), (BudgetMode::SurfaceOnly, 16), (BudgetMode::HierarchicalBaseline, 24)]
    );
    assert_eq!(
        budget_table(&rows),
        "mode,queries\ncumulative,27\nsurface_only,16\nhierarchical_baseline,24\n"
    );
    assert!(cmd_budget(0, 3, 12).is_err());
    assert!(cmd_budget(12, 3, 0).is_err());
}

#[test]
fn budget_binary_output() {
    let out = occufield(&["budget", "--m", "9", "--ms", "1", "--n", "20"]);
    assert!(out.status.success());
    assert_eq!(
        String::from_utf8(out.stdout).unwrap(),
        "mode,queries\ncumulative,30\nsurface_only,11\nhierarchical_baseline,40\n"
    );
}

#[test]
fn schedule_from_preset() {
    let out = occufield(&["schedule", "--preset", "bfm", "--max-step", "70000", "--every", "10000"]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    let rows: Vec<(u64, f64)> = text
        .lines()
        .skip(1)
        .map(|l| {
            let (n, d) = l.split_once(',').unwrap();
            (n.parse().unwrap(), d.parse().unwrap())
        })
        .collect();
    assert_eq!(rows.len(), 8);
    assert_eq!(rows[0].0, 0);
    assert!((rows[0].1 - 0.12).abs() < 1e-15);
    assert!((rows[1].1 - 0.12 * (-0.4f64).exp()).abs() < 1e-15);
    assert_eq!(rows[7], (70000, 0.01));
}

#[test]
fn schedule_gamma_override_and_bad_step() {
    let schedule = scene("sphere.json").shrink_schedule().unwrap();
    let csv = cmd_schedule(&schedule, 5, 2).unwrap();
    assert_eq!(csv.lines().map(|l| l.split(',').next().unwrap()).collect::<Vec<_>>(), ["n", "0", "2", "4", "5"]);
    assert!(cmd_schedule(&schedule, 5, 0).is_err());

    let out = occufield(&["schedule", "--preset", "cats", "--gamma", "0", "--max-step", "10", "--every", "5"]);
    let text = String::from_utf8(out.stdout).unwrap();
    let rows: Vec<(&str, f64)> = text.lines().skip(1).map(|l| l.split_once(',').unwrap()).map(|(n, d)| (n, d.parse().unwrap())).collect();
    assert_eq!(rows.iter().map(|r| r.0).collect::<Vec<_>>(), ["0", "5", "10"]);
    assert!(rows.iter().all(|r| r.1 == rows[0].1 && (r.1 - 0.2).abs() < 1e-15));
}

#[test]
fn config_round_trip() {
    for name in ["sphere.json", "box.json", "neural.json", "sphere_fit.json"] {
        let config = scene(name);
        let again = SceneConfig::from_json(&config.to_json()).unwrap();
        assert_eq!(config, again, "{name}");
    }
}

#[test]
fn config_errors_name_the_problem() {
    let err = SceneConfig::from_json(r#"{"preset":"bfm","field":{"analytic":{"shape":{"sphere":{"center":[0,0,0],"radius":0.1}},"sharpness":200.0,"color":{"constant":[1,1,1]}}},"rendr":{}}"#)
        .unwrap_err()
        .to_string();
    assert!(err.contains("rendr"), "{err}");

    let err = SceneConfig::from_json("{\n  \"preset\": \"bfm\",\n  oops\n}").unwrap_err().to_string();
    assert!(err.contains("line 3"), "{err}");

    let err = SceneConfig::from_json(r#"{"preset":"imagenet"}"#).unwrap_err().to_string();
    assert!(err.contains("imagenet"), "{err}");
}

#[test]
fn bad_config_exits_with_config_code() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "bad.json", r#"{"preset":"bfm","unknown_key":1}"#);
    let out = occufield(&["render", "--config", cfg.to_str().unwrap(), "--out", dir.path().join("x.ppm").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("unknown_key"));

    let out = occufield(&["render", "--config", dir.path().join("missing.json").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn render_is_repeatable_and_modes_agree() {
    let config = scene("sphere.json");
    let options = RenderOptions::default();
    let (a, diag) = cmd_render(&config, &options).unwrap();
    let (b, _) = cmd_render(&config, &options).unwrap();
    assert_eq!(a.to_ppm(), b.to_ppm());
    assert_eq!((diag.width, diag.height), (64, 64));
    assert_eq!(diag.surface_hits, 0);

    let density = RenderOptions {
        mode: Some(occufield::render::RenderMode::DensityCumulative),
        ..RenderOptions::default()
    };
    let (c, _) = cmd_render(&config, &density).unwrap();
    for (p, q) in a.pixels.iter().zip(&c.pixels) {
        for k in 0..3 {
            assert!((p[k] - q[k]).abs() < 1e-12);
        }
    }
}

#[test]
fn narrow_window_render_is_close_to_surface_render() {
    let config = sharp_sphere();
    let options = RenderOptions {
        delta: Some(0.01),
        compare: Some(occufield::render::RenderMode::SurfaceOnly),
        ..RenderOptions::default()
    };
    let (_, diag) = cmd_render(&config, &options).unwrap();
    assert!(diag.surface_hits > 0 && diag.surface_hits < 64 * 64);
    assert!(diag.psnr_vs_reference.unwrap() >= 35.0, "{diag:?}");
    let bad = RenderOptions {
        delta: Some(0.0),
        ..RenderOptions::default()
    };
    assert!(cmd_render(&config, &bad).is_err());
}

#[test]
fn render_writes_png_and_ppm() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = configs().join("box.json");
    for name in ["box.png", "box.ppm"] {
        let out_path = dir.path().join(name);
        let diag = dir.path().join("diag.json");
        let out = occufield(&[
            "render",
            "--config",
            cfg.to_str().unwrap(),
            "--out",
            out_path.to_str().unwrap(),
            "--diagnostics",
            diag.to_str().unwrap(),
        ]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        let bytes = std::fs::read(&out_path).unwrap();
        if name.ends_with("png") {
            assert_eq!(&bytes[1..4], b"PNG");
        } else {
            assert!(bytes.starts_with(b"P6\n64 64\n255\n"));
        }
        let d: serde_json::Value = serde_json::from_slice(&std::fs::read(&diag).unwrap()).unwrap();
        assert_eq!(d["width"], 64);
    }
}

#[test]
fn neural_render_depends_on_latent_seed() {
    let config = scene("neural.json");
    let (a, _) = cmd_render(&config, &RenderOptions::default()).unwrap();
    let (b, _) = cmd_render(&config, &RenderOptions { latent_seed: Some(99), ..RenderOptions::default() }).unwrap();
    assert_eq!((a.width, a.height), (48, 48));
    assert_ne!(a.pixels, b.pixels);
}

#[test]
fn sphere_mesh_is_closed_and_repeatable() {
    let config = scene("sphere.json");
    let mesh = cmd_extract(&config, 32, None).unwrap();
    assert!(mesh.is_closed());
    assert_eq!(mesh.euler_characteristic(), 2);
    assert_eq!(mesh.to_obj(), cmd_extract(&config, 32, None).unwrap().to_obj());
}

#[test]
fn empty_field_writes_empty_mesh() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(
        dir.path(),
        "empty.json",
        r#"{"preset":"bfm","field":{"analytic":{"shape":{"constant":{"alpha":0.1}},"sharpness":200.0,"color":{"constant":[1,1,1]}}}}"#,
    );
    let mesh_path = dir.path().join("m.obj");
    let out = occufield(&["extract", "--config", cfg.to_str().unwrap(), "--resolution", "8", "--out", mesh_path.to_str().unwrap()]);
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("warning"));
    let obj = std::fs::read_to_string(&mesh_path).unwrap();
    assert!(!obj.lines().any(|l| l.starts_with("v ") || l.starts_with("f ")));
}

#[test]
fn verify_suites_pass_on_sample_scenes() {
    let report = cmd_verify(&scene("box.json"), Suite::Rootfind, None).unwrap();
    assert!(report.passed, "{report:?}");
    let report = cmd_verify(&sharp_sphere(), Suite::Equivalence, None).unwrap();
    assert!(report.passed, "{report:?}");
    let report = cmd_verify(&scene("neural.json"), Suite::All, None).unwrap();
    assert!(report.passed, "{report:?}");
    assert_eq!(report.suites.len(), 3);
}

#[test]
fn verify_failure_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(
        dir.path(),
        "coarse.json",
        r#"{"preset":"bfm","render":{"root":{"bins":3,"secant_steps":0,"tau":0.5}},
            "field":{"analytic":{"shape":{"sphere":{"center":[0,0,0],"radius":0.11}},"sharpness":200.0,"color":{"constant":[1,1,1]}}}}"#,
    );
    let out = occufield(&["verify", "--config", cfg.to_str().unwrap(), "--suite", "rootfind"]);
    assert_eq!(out.status.code(), Some(1), "{}", String::from_utf8_lossy(&out.stderr));
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(report["passed"], false);
}

#[test]
fn zero_step_fit_writes_initial_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("init.ofnf");
    let log = dir.path().join("log.jsonl");
    let out = occufield(&[
        "fit",
        "--config",
        configs().join("sphere_fit.json").to_str().unwrap(),
        "--steps",
        "0",
        "--views",
        "2",
        "--out",
        ckpt.to_str().unwrap(),
        "--log",
        log.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let config = scene("sphere_fit.json");
    let fresh = FilmSirenField::new(config.fit.model, config.fit.model_seed).unwrap();
    assert_eq!(std::fs::read(&ckpt).unwrap(), fresh.to_bytes());
    assert!(std::fs::read_to_string(&log).unwrap().is_empty());
    let summary: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(summary["steps"], 0);
}

#[test]
fn checkpoint_loads_as_neural_field() {
    let dir = tempfile::tempdir().unwrap();
    let config = scene("sphere_fit.json");
    let field = FilmSirenField::new(config.fit.model, 5).unwrap();
    std::fs::write(dir.path().join("f.ofnf"), field.to_bytes()).unwrap();
    let dims = serde_json::to_string(&config.fit.model).unwrap();
    let cfg = write(
        dir.path(),
        "n.json",
        &format!(r#"{{"preset":"bfm","field":{{"neural":{{"checkpoint":"f.ofnf","dims":{dims}}}}},"camera":{{"fov_deg":12,"width":8,"height":8}}}}"#),
    );
    let config = SceneConfig::load(&cfg).unwrap();
    let (image, _) = cmd_render(&config, &RenderOptions::default()).unwrap();
    assert_eq!(image.pixels.len(), 64);
}

#[test]
fn threads_env_overrides_flag() {
    let out = Command::new(env!("CARGO_BIN_EXE_occufield"))
        .args(["--threads", "2", "budget"])
        .env("OCCUFIELD_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn divergence_rule_and_clipping() {
    assert!(!diverged(9.0, 1.0));
    assert!(diverged(10.5, 1.0));
    assert!(!diverged(-1.0, -2.0));
    assert!(diverged(17.0, -2.0));

    let mut g = vec![3.0, 4.0];
    clip_gradient(&mut g, 1.0);
    assert!((g[0] - 0.6).abs() < 1e-15 && (g[1] - 0.8).abs() < 1e-15);
    let mut g = vec![3.0, 4.0];
    clip_gradient(&mut g, 0.0);
    assert_eq!(g, [3.0, 4.0]);
}

#[test]
fn learning_rate_decays_geometrically() {
    assert_eq!(learning_rate(1e-3, None, 500, 1000), 1e-3);
    assert_eq!(learning_rate(1e-3, Some(1e-5), 0, 1000), 1e-3);
    assert!((learning_rate(1e-3, Some(1e-5), 500, 1000) - 1e-4).abs() < 1e-18);
    assert!((learning_rate(1e-3, Some(1e-5), 1000, 1000) - 1e-5).abs() < 1e-18);
    assert_eq!(learning_rate(1e-3, Some(1e-5), 0, 0), 1e-3);
}
