use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use nalgebra::DVector;
use serde_json::json;

use resample_core::config::{presets, ExperimentConfig, SAMPLER_STREAM};
use resample_core::experiments::{run_experiment, ExperimentOutcome, EXPERIMENTS};
use resample_core::io::{write_csv, write_pgm, write_tensor, CsvRow, Tensor};
use resample_core::oracle::exact_linear_posterior;
use resample_core::parallel::Execution;
use resample_core::rng::stream;
use resample_core::Error;

#[derive(Parser)]
#[command(
    name = "resample-lab",
    version,
    about = "Latent-diffusion inverse problems with an exact mixture score"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// JSON experiment configuration.
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// `key=value` with a dotted path or JSON pointer key; repeatable.
    #[arg(long = "override", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Reconstruct from the measurement described by a config.
    Run {
        #[command(flatten)]
        config: ConfigArgs,
        /// resample, latent_dps or fbp.
        #[arg(long)]
        solver: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run a named experiment suite, or `all`.
    Experiment {
        name: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        /// Run trials in a plain loop instead of the thread pool.
        #[arg(long)]
        sequential: bool,
        /// Exit with status 1 when any check fails.
        #[arg(long)]
        strict: bool,
    },
    /// Print the exact posterior for a linear decoder and operator.
    Oracle {
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Print a built-in configuration (two-mode, inpainting, ct).
    Preset {
        name: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn load_config(args: &ConfigArgs, extra: &[String]) -> Result<ExperimentConfig> {
    let text = fs::read_to_string(&args.config).map_err(|e| Error::Config {
        pointer: "/".into(),
        message: format!("cannot read {}: {e}", args.config.display()),
    })?;
    let mut overrides = args.overrides.clone();
    if let Some(seed) = args.seed {
        overrides.push(format!("seed={seed}"));
    }
    overrides.extend_from_slice(extra);
    Ok(ExperimentConfig::from_json_str(&text, &overrides)?)
}

fn write_outcome(out: &Path, outcome: &ExperimentOutcome) -> Result<()> {
    write_csv(
        &out.join(format!("{}.csv", outcome.name)),
        &outcome.csv_rows(),
    )?;
    fs::write(
        out.join(format!("{}.json", outcome.name)),
        serde_json::to_vec_pretty(outcome)?,
    )?;
    Ok(())
}

fn cmd_run(args: &ConfigArgs, solver: Option<&str>, out: Option<&Path>) -> Result<()> {
    let extra: Vec<String> = solver.map(|s| format!("solver={s}")).into_iter().collect();
    let cfg = load_config(args, &extra)?;
    let problem = cfg.build()?;
    let out = out
        .map(Path::to_path_buf)
        .or_else(|| cfg.output_dir.as_ref().map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("out"));
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;

    let mut rng = stream(cfg.seed, SAMPLER_STREAM);
    let report = problem.solve(cfg.solver, &mut rng)?;
    let metrics = problem.metrics(&report.x0)?;
    let hash = cfg.config_hash();

    let doc = json!({
        "solver": cfg.solver.name(),
        "seed": cfg.seed,
        "config_hash": hash,
        "config": cfg,
        "metrics": metrics,
        "reconstruction": report,
    });
    fs::write(out.join("report.json"), serde_json::to_vec_pretty(&doc)?)?;

    let row = |metric: &str, value: f64| CsvRow {
        experiment: format!("run:{}", cfg.solver.name()),
        metric: metric.into(),
        value,
        seed: cfg.seed,
        config_hash: hash.clone(),
    };
    let mut rows = vec![row("residual", metrics.residual)];
    if let Some(p) = metrics.psnr {
        rows.push(row("psnr", p));
    }
    if let Some(s) = metrics.ssim {
        rows.push(row("ssim", s));
    }
    write_csv(&out.join("metrics.csv"), &rows)?;

    if !report.z0.is_empty() {
        write_tensor(&out.join("z0.f64"), &Tensor::vector(report.z0.clone()))?;
    }
    let shape = match cfg.image_shape {
        Some([h, w]) => vec![h, w],
        None => vec![report.x0.len()],
    };
    write_tensor(&out.join("x0.f64"), &Tensor::new(shape, report.x0.clone())?)?;
    if let Some([h, w]) = cfg.image_shape {
        write_pgm(&out.join("x0.pgm"), &report.x0, h, w)?;
        if let Some(truth) = &problem.truth_pixel {
            write_pgm(&out.join("truth.pgm"), truth.as_slice(), h, w)?;
        }
    }
    println!(
        "{} seed={} residual={:.6e}{}",
        cfg.solver.name(),
        cfg.seed,
        metrics.residual,
        metrics
            .psnr
            .map(|p| format!(" psnr={p:.3}"))
            .unwrap_or_default()
    );
    Ok(())
}

fn cmd_experiment(
    name: &str,
    seed: u64,
    out: &Path,
    exec: Execution,
    strict: bool,
) -> Result<bool> {
    let names: Vec<&str> = if name == "all" {
        EXPERIMENTS.to_vec()
    } else {
        vec![name]
    };
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let mut all_passed = true;
    for name in names {
        let outcome = run_experiment(name, seed, exec)?;
        write_outcome(out, &outcome)?;
        for c in &outcome.checks {
            println!(
                "{} {}::{} ({})",
                if c.passed { "PASS" } else { "FAIL" },
                outcome.name,
                c.name,
                c.detail
            );
        }
        all_passed &= outcome.passed();
    }
    Ok(!strict || all_passed)
}

fn cmd_oracle(args: &ConfigArgs) -> Result<()> {
    let cfg = load_config(args, &[])?;
    let problem = cfg.build()?;
    let posterior = exact_linear_posterior(
        &problem.prior,
        &problem.map,
        &problem.op,
        &DVector::from_column_slice(&problem.measurement.y),
        problem.measurement.sigma_y,
    )?;
    let doc = json!({
        "seed": cfg.seed,
        "config_hash": cfg.config_hash(),
        "measurement": problem.measurement,
        "posterior": posterior,
    });
    println!("{}", serde_json::to_string_pretty(&doc)?);
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<Error>() {
        Some(Error::Config { .. } | Error::UnknownExperiment(_)) => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Run {
            config,
            solver,
            out,
        } => cmd_run(config, solver.as_deref(), out.as_deref()).map(|_| true),
        Command::Experiment {
            name,
            seed,
            out,
            sequential,
            strict,
        } => {
            let exec = if *sequential {
                Execution::Sequential
            } else {
                Execution::default()
            };
            cmd_experiment(name, *seed, out, exec, *strict)
        }
        Command::Oracle { config } => cmd_oracle(config).map(|_| true),
        Command::Preset { name, seed } => match presets::by_name(name, *seed) {
            Some(cfg) => {
                println!("{}", cfg.to_json_pretty());
                Ok(true)
            }
            None => Err(Error::Config {
                pointer: "/".into(),
                message: format!(
                    "unknown preset `{name}`; known: {}",
                    presets::NAMES.join(", ")
                ),
            }
            .into()),
        },
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}
