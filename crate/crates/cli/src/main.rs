//! `epienkf`: run the epidemic model, synthesize data, cycle the filters
//! and recompute diagnostics from dumped fields.
//!
//! Failures print one line, `error: kind=<kind> msg="<message>"`, and exit
//! with status 1.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand};

use epienkf::assimilation::{centroid_error, run_experiment_with, simulate, synthesize_data, Streams};
use epienkf::config::{parse_config, ExperimentConfig, Variant};
use epienkf::io::{read_field, reports_to_csv, DumpSink, OutputDir, RunManifest};
use epienkf::{Error, Result};

#[derive(Debug, Parser)]
#[command(
    name = "epienkf",
    version,
    about = "Ensemble Kalman filters for a spatial epidemic model"
)]
struct Cli {
    /// TOML configuration; defaults are used for everything it omits.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,

    /// Master seed, overriding the configuration.
    #[arg(long, global = true, value_name = "U64")]
    seed: Option<u64>,

    /// Filter variant: enkf, fft_enkf, morphing_enkf, morphing_fft_enkf or all.
    #[arg(long, global = true, value_name = "NAME")]
    variant: Option<String>,

    /// Output directory.
    #[arg(long, global = true, value_name = "DIR", default_value = "out")]
    out: PathBuf,

    /// Worker threads for advancing ensemble members. Every member owns its
    /// random stream, so results do not depend on this.
    #[arg(long, global = true, value_name = "N")]
    lanes: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run the model from the initial outbreak and dump S, I and R.
    Simulate {
        /// Number of model steps.
        #[arg(long, default_value_t = 120)]
        steps: usize,
        /// Dump every this many steps.
        #[arg(long, default_value_t = 20)]
        every: usize,
    },
    /// Dump the synthetic data frames of the truth run.
    Synthesize,
    /// Run the assimilation experiment.
    Assimilate,
    /// RMSE and centroid distance between two dumped fields.
    Diagnose { a: PathBuf, b: PathBuf },
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut config = match &cli.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
                path: path.display().to_string(),
                source: e,
            })?;
            parse_config(&text)?
        }
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        config.ensemble.seed = seed;
    }
    if let Some(lanes) = cli.lanes {
        config.ensemble.lanes = lanes;
    }
    if let Some(v) = cli.variant.as_deref() {
        if v != "all" {
            config.filter.variant = v.parse()?;
        }
    }
    config.validate()?;
    Ok(config)
}

fn cmd_simulate(config: &ExperimentConfig, out: &Path, steps: usize, every: usize) -> Result<()> {
    let started = Instant::now();
    let frames = simulate(config, steps, every)?;
    let mut dir = OutputDir::new(out, config.grid()?)?;
    for f in &frames {
        dir.state(&format!("step-{:04}", f.time.round() as u64), f)?;
    }
    let mut manifest = RunManifest::new("simulate", config);
    manifest
        .streams
        .retain(|(name, _)| matches!(name.as_str(), "master" | "truth" | "population"));
    manifest.outputs = dir.written.clone();
    manifest
        .timings
        .push(("simulate".into(), started.elapsed().as_secs_f64()));
    manifest.write(&out.join("manifest.toml"))?;
    println!("simulate: {} frames in {}", frames.len(), out.display());
    Ok(())
}

fn cmd_synthesize(config: &ExperimentConfig, out: &Path) -> Result<()> {
    let started = Instant::now();
    let mut truth = Streams::new(config.ensemble.seed, 0).truth;
    let frames = synthesize_data(config, &mut truth)?;
    let mut dir = OutputDir::new(out, config.grid()?)?;
    for (c, f) in frames.iter().enumerate() {
        dir.field(&format!("data-cycle-{}_I", c + 1), f)?;
    }
    let mut manifest = RunManifest::new("synthesize", config);
    manifest
        .streams
        .retain(|(name, _)| matches!(name.as_str(), "master" | "truth" | "population"));
    manifest.outputs = dir.written.clone();
    manifest
        .timings
        .push(("synthesize".into(), started.elapsed().as_secs_f64()));
    manifest.write(&out.join("manifest.toml"))?;
    println!("synthesize: {} frames in {}", frames.len(), out.display());
    Ok(())
}

fn cmd_assimilate(config: &ExperimentConfig, out: &Path, variants: &[Variant]) -> Result<()> {
    for &variant in variants {
        let mut config = config.clone();
        config.filter.variant = variant;
        let dir_path = out.join(variant.name());
        let mut sink = DumpSink::new(OutputDir::new(&dir_path, config.grid()?)?);
        let mut manifest = RunManifest::new("assimilate", &config);
        let result = run_experiment_with(&config, &mut sink);

        // the manifest is written even when a cycle fails
        manifest.outputs = sink.out.written.clone();
        manifest.warnings = sink.reports.iter().flat_map(|r| r.warnings.clone()).collect();
        if let Ok(t) = &result {
            manifest.timings.push(("spinup".into(), t.spinup.as_secs_f64()));
            for (c, d) in t.cycles.iter().enumerate() {
                manifest.timings.push((format!("cycle-{}", c + 1), d.as_secs_f64()));
            }
        }
        manifest.write(&dir_path.join("manifest.toml"))?;
        result?;

        print!("{variant}\n{}", reports_to_csv(&sink.reports));
    }
    Ok(())
}

fn cmd_diagnose(a: &Path, b: &Path) -> Result<()> {
    let (fa, ga) = read_field(a)?;
    let (fb, gb) = read_field(b)?;
    if ga != gb {
        return Err(Error::ShapeMismatch {
            expected: ga.shape(),
            got: gb.shape(),
        });
    }
    let rmse = fa.rmse(&fb);
    let centroid = centroid_error(&fa, &fb, &ga)?;
    println!("rmse={rmse:?} centroid_error_km={centroid:?}");
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    if let Command::Diagnose { a, b } = &cli.command {
        return cmd_diagnose(a, b);
    }
    let config = load_config(cli)?;
    match &cli.command {
        Command::Simulate { steps, every } => cmd_simulate(&config, &cli.out, *steps, *every),
        Command::Synthesize => cmd_synthesize(&config, &cli.out),
        Command::Assimilate => {
            let variants: Vec<Variant> = if cli.variant.as_deref() == Some("all") {
                Variant::ALL.to_vec()
            } else {
                vec![config.filter.variant]
            };
            cmd_assimilate(&config, &cli.out, &variants)
        }
        Command::Diagnose { .. } => unreachable!("handled above"),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = e
                .to_string()
                .replace('\\', "\\\\")
                .replace('"', "\\\"")
                .replace('\n', " ");
            eprintln!("error: kind={} msg=\"{msg}\"", e.kind());
            ExitCode::FAILURE
        }
    }
}
