use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use layerprobe::container::write_atomic;
use layerprobe::data::synth_blobs;
use layerprobe::harness::config::{defaults_toml, preset, PRESETS};
use layerprobe::harness::{load_config, report, run_protocol, validate_dump, write_run_outputs, ExperimentConfig};
use layerprobe::nn::{gradient_check, init_mlp};
use serde::Serialize;

#[derive(Parser)]
#[command(
    name = "layerprobe",
    version,
    about = "Probe agreement diagnostics for neural classifiers"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the experiment described by a config file or preset.
    Run {
        /// Path to a TOML config, or the name of a built-in preset.
        #[arg(long)]
        config: String,
        /// Override a config value, e.g. `schedule.total_steps=0`. Repeatable.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        /// Root for relative output directories.
        #[arg(long, env = "LAYERPROBE_OUTPUT_ROOT", default_value = "runs")]
        output_root: PathBuf,
    },
    /// Check an activation dump manifest and every file it names.
    ValidateDump { manifest: PathBuf },
    /// Emit figure data and a summary from one or more series JSON files.
    Report {
        #[arg(required = true)]
        series: Vec<PathBuf>,
        #[arg(long, short)]
        out: PathBuf,
    },
    /// Print the default config schema, or a preset.
    Defaults {
        #[arg(long)]
        preset: Option<String>,
        /// List preset names instead.
        #[arg(long)]
        list: bool,
    },
    /// Compare backpropagation with central finite differences.
    GradientCheck {
        /// Layer sizes, input first.
        #[arg(long, value_delimiter = ',', default_value = "784,640,10")]
        sizes: Vec<usize>,
        #[arg(long, default_value_t = 1e-5)]
        epsilon: f64,
        #[arg(long, default_value_t = 16)]
        batch: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Largest acceptable relative error.
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
    },
}

/// Failure with the exit status it maps to.
struct Failure {
    code: u8,
    error: anyhow::Error,
}

fn usage(error: impl Into<anyhow::Error>) -> Failure {
    Failure {
        code: 2,
        error: error.into(),
    }
}

fn runtime(error: impl Into<anyhow::Error>) -> Failure {
    Failure {
        code: 1,
        error: error.into(),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run {
            config,
            overrides,
            output_root,
        } => cmd_run(&config, &overrides, &output_root),
        Command::ValidateDump { manifest } => cmd_validate_dump(&manifest),
        Command::Report { series, out } => cmd_report(&series, &out),
        Command::Defaults { preset, list } => cmd_defaults(preset.as_deref(), list),
        Command::GradientCheck {
            sizes,
            epsilon,
            batch,
            seed,
            tolerance,
        } => cmd_gradient_check(&sizes, epsilon, batch, seed, tolerance),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}

#[derive(Serialize)]
struct RunManifest<'a> {
    config: &'a str,
    overrides: &'a [String],
    output_dir: PathBuf,
    outputs: Vec<PathBuf>,
    engine_version: &'static str,
    timestamp_unix: u64,
}

fn output_dir(cfg: &ExperimentConfig, root: &Path) -> PathBuf {
    match &cfg.output_dir {
        Some(d) if d.is_absolute() => d.clone(),
        Some(d) => root.join(d),
        None => root.join(&cfg.name),
    }
}

fn cmd_run(config: &str, overrides: &[String], root: &Path) -> Result<(), Failure> {
    let cfg = load_config(config, overrides).map_err(usage)?;
    let dir = output_dir(&cfg, root);
    std::fs::create_dir_all(&dir)
        .with_context(|| format!("creating {}", dir.display()))
        .map_err(runtime)?;
    let outputs = ["series.csv", "series.json", "config.toml", "detectors.json", "report"]
        .iter()
        .map(|f| dir.join(f))
        .collect();
    let manifest = RunManifest {
        config,
        overrides,
        output_dir: dir.clone(),
        outputs,
        engine_version: env!("CARGO_PKG_VERSION"),
        timestamp_unix: SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs()),
    };
    let bytes = serde_json::to_vec_pretty(&manifest).map_err(runtime)?;
    write_atomic(&dir.join("run_manifest.json"), |w| std::io::Write::write_all(w, &bytes)).map_err(runtime)?;

    eprintln!(
        "running {} ({}) into {}",
        cfg.name,
        cfg.protocol.as_str(),
        dir.display()
    );
    let series = run_protocol(&cfg).map_err(|e| match e {
        layerprobe::Error::Config { .. } => usage(e),
        other => runtime(other),
    })?;
    let written = write_run_outputs(&cfg, &series, &dir).map_err(runtime)?;
    print!("{}", report::summary_text(std::slice::from_ref(&series)));
    println!("series: {}", written.series_csv.display());
    if let Some(f) = &series.metadata.training_failure {
        return Err(runtime(anyhow::anyhow!(
            "training stopped at step {}: {} (partial outputs written)",
            f.step,
            f.message
        )));
    }
    Ok(())
}

fn cmd_validate_dump(manifest: &Path) -> Result<(), Failure> {
    let report = validate_dump(manifest).map_err(usage)?;
    for v in &report.verdicts {
        match &v.detail {
            Ok(msg) => println!("ok    {}: {msg}", v.file.display()),
            Err(msg) => println!("FAIL  {}: {msg}", v.file.display()),
        }
    }
    for p in &report.problems {
        println!("FAIL  {p}");
    }
    if report.is_ok() {
        println!("manifest {} is valid", manifest.display());
        Ok(())
    } else {
        Err(usage(anyhow::anyhow!(
            "manifest {} failed validation",
            manifest.display()
        )))
    }
}

fn cmd_report(paths: &[PathBuf], out: &Path) -> Result<(), Failure> {
    let series = paths
        .iter()
        .map(|p| report::load_series(p).map_err(usage))
        .collect::<Result<Vec<_>, _>>()?;
    let written = report::write_report(&series, out).map_err(runtime)?;
    for p in written {
        println!("{}", p.display());
    }
    Ok(())
}

fn cmd_defaults(name: Option<&str>, list: bool) -> Result<(), Failure> {
    if list {
        for (n, _) in PRESETS {
            println!("{n}");
        }
        return Ok(());
    }
    match name {
        None => print!("{}", defaults_toml()),
        Some(n) => print!(
            "{}",
            preset(n).ok_or_else(|| usage(anyhow::anyhow!("no preset named `{n}`")))?
        ),
    }
    Ok(())
}

fn cmd_gradient_check(sizes: &[usize], epsilon: f64, batch: usize, seed: u64, tolerance: f64) -> Result<(), Failure> {
    let model = init_mlp(sizes, seed).map_err(usage)?;
    let (inputs, classes) = (sizes[0], *sizes.last().unwrap());
    if classes < 2 || inputs < classes || batch == 0 {
        return Err(usage(anyhow::anyhow!(
            "gradient-check needs at least 2 classes, inputs >= classes and a nonempty batch"
        )));
    }
    let data = synth_blobs(classes, batch.div_ceil(classes), inputs, 0.5, seed).map_err(runtime)?;
    let idx: Vec<usize> = (0..batch).collect();
    let data = data.select(&idx, "gradient-check");
    let err = gradient_check(&model, &data.features, &data.labels, epsilon).map_err(usage)?;
    println!("max relative error {err:.3e} over sampled parameters (epsilon {epsilon:e})");
    if err < tolerance {
        println!("ok");
        Ok(())
    } else {
        Err(runtime(anyhow::anyhow!(
            "relative error {err:.3e} exceeds {tolerance:e}"
        )))
    }
}
