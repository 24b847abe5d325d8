use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};
use occufield::render::RenderMode;
use occufield::sampling::ShrinkSchedule;
use occufield_cli::commands::{
    budget_table, cmd_budget, cmd_extract, cmd_render, cmd_schedule, write_image, RenderOptions,
};
use occufield_cli::config::{io_error, preset, SceneConfig, ScheduleSpec};
use occufield_cli::fit::{fit, FitError, FitOptions};
use occufield_cli::verify::{cmd_verify, Suite};
use occufield_cli::{exit_code, EXIT_DIVERGED, EXIT_VERIFY_FAILED};

#[derive(Parser)]
#[command(name = "occufield", version, about = "Occupancy-field rendering, shrink-fit and verification tool")]
struct Cli {
    /// Worker threads; OCCUFIELD_THREADS takes precedence when set.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render the frontal view of a scene.
    Render {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_enum)]
        mode: Option<ModeArg>,
        #[arg(long, default_value = "render.ppm")]
        out: PathBuf,
        #[arg(long)]
        latent_seed: Option<u64>,
        /// Write diagnostics JSON here instead of stdout.
        #[arg(long)]
        diagnostics: Option<PathBuf>,
        /// Sample cumulative modes within this distance of the surface.
        #[arg(long)]
        delta: Option<f64>,
        /// Report the PSNR against a render in this mode.
        #[arg(long, value_enum)]
        compare: Option<ModeArg>,
    },
    /// Fit a neural field to multi-view renders of the analytic scene.
    Fit {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 2000)]
        steps: u64,
        #[arg(long)]
        views: Option<usize>,
        /// Keep the sampling window at the whole volume.
        #[arg(long)]
        no_shrink: bool,
        /// JSON-lines training log.
        #[arg(long)]
        log: Option<PathBuf>,
        /// Checkpoint path.
        #[arg(long, default_value = "fit.ofnf")]
        out: PathBuf,
    },
    /// Print the shrink schedule as CSV.
    Schedule {
        #[arg(long, conflicts_with = "preset", required_unless_present = "preset")]
        config: Option<PathBuf>,
        /// Take the schedule from a dataset preset instead of a config.
        #[arg(long)]
        preset: Option<String>,
        #[arg(long)]
        gamma: Option<f64>,
        #[arg(long, default_value_t = 100_000)]
        max_step: u64,
        #[arg(long, default_value_t = 1000)]
        every: u64,
    },
    /// Field queries per pixel of each rendering strategy.
    Budget {
        /// Root-finding bins.
        #[arg(long = "m", visible_alias = "M", default_value_t = 12)]
        m: usize,
        /// Secant steps.
        #[arg(long, default_value_t = 3)]
        ms: usize,
        /// Samples per ray.
        #[arg(long = "n", visible_alias = "N", default_value_t = 12)]
        n: usize,
    },
    /// Extract the iso-surface as an OBJ mesh.
    Extract {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 64)]
        resolution: usize,
        #[arg(long, default_value = "mesh.obj")]
        out: PathBuf,
        #[arg(long)]
        latent_seed: Option<u64>,
    },
    /// Run oracle suites and print a JSON report.
    Verify {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_enum, default_value_t = SuiteArg::All)]
        suite: SuiteArg,
        #[arg(long)]
        latent_seed: Option<u64>,
    },
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum ModeArg {
    DensityCumulative,
    AlphaCumulative,
    SurfaceOnly,
}

impl From<ModeArg> for RenderMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::DensityCumulative => RenderMode::DensityCumulative,
            ModeArg::AlphaCumulative => RenderMode::AlphaCumulative,
            ModeArg::SurfaceOnly => RenderMode::SurfaceOnly,
        }
    }
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum SuiteArg {
    Equivalence,
    Rootfind,
    Gradients,
    All,
}

impl From<SuiteArg> for Suite {
    fn from(s: SuiteArg) -> Self {
        match s {
            SuiteArg::Equivalence => Suite::Equivalence,
            SuiteArg::Rootfind => Suite::Rootfind,
            SuiteArg::Gradients => Suite::Gradients,
            SuiteArg::All => Suite::All,
        }
    }
}

fn threads(flag: Option<usize>) -> anyhow::Result<Option<usize>> {
    match std::env::var("OCCUFIELD_THREADS") {
        Ok(v) => Ok(Some(v.trim().parse().context("OCCUFIELD_THREADS must be a positive integer")?)),
        Err(_) => Ok(flag),
    }
}

fn write_json(path: Option<&Path>, value: &impl serde::Serialize) -> anyhow::Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    match path {
        Some(p) => std::fs::write(p, text + "\n").map_err(|e| io_error(p, e))?,
        None => println!("{text}"),
    }
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<u8> {
    match cli.command {
        Command::Render { config, mode, out, latent_seed, diagnostics, delta, compare } => {
            let config = SceneConfig::load(&config)?;
            let options = RenderOptions {
                mode: mode.map(Into::into),
                latent_seed,
                delta,
                compare: compare.map(Into::into),
            };
            let (image, diag) = cmd_render(&config, &options)?;
            write_image(&image, &out)?;
            write_json(diagnostics.as_deref(), &diag)?;
        }
        Command::Fit { config, steps, views, no_shrink, log, out } => {
            let config = SceneConfig::load(&config)?;
            let mut log_file = match &log {
                Some(p) => Some(BufWriter::new(File::create(p).map_err(|e| io_error(p, e))?)),
                None => None,
            };
            let mut log_error = None;
            let options = FitOptions { steps, views, shrink: !no_shrink };
            let result = fit(&config, &options, |entry| {
                if let Some(f) = log_file.as_mut() {
                    if let Err(e) = serde_json::to_writer(&mut *f, entry).map_err(std::io::Error::from).and_then(|_| f.write_all(b"\n")) {
                        log_error.get_or_insert(e);
                    }
                }
            });
            if let Some(f) = log_file.as_mut() {
                f.flush()?;
            }
            if let Some(e) = log_error {
                return Err(e.into());
            }
            match result {
                Ok(outcome) => {
                    std::fs::write(&out, outcome.field.to_bytes()).map_err(|e| io_error(&out, e))?;
                    let summary = serde_json::json!({
                        "steps": outcome.report.steps,
                        "shrink": outcome.report.shrink,
                        "final_delta": outcome.report.final_delta,
                        "initial_loss": outcome.report.initial_loss,
                        "final": outcome.report.final_eval,
                        "checkpoint": out,
                    });
                    write_json(None, &summary)?;
                }
                Err(FitError::Diverged { step, log }) => {
                    eprintln!("error: training diverged at step {step}");
                    if let Some(last) = log.last() {
                        eprintln!("last log entry: {}", serde_json::to_string(last)?);
                    }
                    return Ok(EXIT_DIVERGED);
                }
                Err(FitError::Field(e)) => return Err(e.into()),
            }
        }
        Command::Schedule { config, preset: name, gamma, max_step, every } => {
            let mut schedule = match (config, name) {
                (Some(path), _) => SceneConfig::load(&path)?.shrink_schedule()?,
                (None, Some(name)) => {
                    let p = preset(&name)?;
                    let spec: ScheduleSpec = serde_json::from_value(p["schedule"].clone())?;
                    let bounds: [f64; 2] = serde_json::from_value(p["bounds"].clone())?;
                    ShrinkSchedule::for_bounds(bounds[0], bounds[1], spec.gamma, spec.delta_min)?
                }
                (None, None) => unreachable!("clap requires one of --config and --preset"),
            };
            if let Some(g) = gamma {
                schedule.gamma = g;
            }
            print!("{}", cmd_schedule(&schedule, max_step, every)?);
        }
        Command::Budget { m, ms, n } => print!("{}", budget_table(&cmd_budget(m, ms, n)?)),
        Command::Extract { config, resolution, out, latent_seed } => {
            let config = SceneConfig::load(&config)?;
            let mesh = cmd_extract(&config, resolution, latent_seed)?;
            if mesh.is_empty() {
                eprintln!("warning: the field has no iso-surface inside the extraction box; writing an empty mesh");
            }
            std::fs::write(&out, mesh.to_obj()).map_err(|e| io_error(&out, e))?;
        }
        Command::Verify { config, suite, latent_seed } => {
            let config = SceneConfig::load(&config)?;
            let report = cmd_verify(&config, suite.into(), latent_seed)?;
            write_json(None, &report)?;
            if !report.passed {
                return Ok(EXIT_VERIFY_FAILED);
            }
        }
    }
    Ok(0)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let pool = threads(cli.threads).and_then(|n| {
        let mut b = rayon::ThreadPoolBuilder::new();
        if let Some(n) = n {
            anyhow::ensure!(n > 0, "thread count must be positive");
            b = b.num_threads(n);
        }
        Ok(b.build_global()?)
    });
    if let Err(e) = pool {
        eprintln!("error: {e:#}");
        return ExitCode::from(occufield_cli::EXIT_CONFIG);
    }
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
