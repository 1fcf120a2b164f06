//! `wnta`: simulate, analyze, calibrate and post-process weighted
//! nanoparticle tracking runs.
//!
//! Every subcommand reads a strict JSON config, materializes it into a
//! `manifest.json` next to its artifacts, and exits nonzero on any error
//! with diagnostics on standard error. Artifacts are only written on
//! success.

use std::path::PathBuf;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};

use wnta::config::{parse_n_w, ResolvedRun, RunConfig};
use wnta::pipeline;

#[derive(Parser)]
#[command(name = "wnta", version, about = "Weighted nanoparticle tracking analysis")]
struct Cli {
    /// Worker threads (0 = automatic). Falls back to WNTA_THREADS.
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Run configuration (strict JSON).
    #[arg(long, short = 'c')]
    config: PathBuf,

    /// Override the config seed.
    #[arg(long)]
    seed: Option<u64>,

    /// Output directory (overrides the config's out_dir).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate an ensemble: tracks.csv, truth.csv and one field image per
    /// particle.
    Simulate(ConfigArgs),

    /// Size particles from tracks plus field images: sizes.csv,
    /// similarity.csv, histogram.csv.
    Analyze {
        #[command(flatten)]
        config: ConfigArgs,

        /// Run directory holding tracks.csv and images/.
        #[arg(long, short = 'i')]
        input: PathBuf,

        /// Override the weight exponent (a number or "inf").
        #[arg(long = "n-w", value_parser = cli_n_w)]
        n_w: Option<f64>,
    },

    /// Sweep the weight exponent on simulated data: sweep.csv and, with
    /// snr_points configured, snr_model.csv.
    Calibrate(ConfigArgs),

    /// Recover per-particle complex refractive indices from a sizes table
    /// and field images: refindex.csv.
    Refindex {
        #[command(flatten)]
        config: ConfigArgs,

        /// sizes.csv produced by analyze.
        #[arg(long)]
        sizes: PathBuf,

        /// Directory of per-particle field images.
        #[arg(long)]
        images: PathBuf,
    },

    /// Average raw frame stacks (frames/ + offsets.csv) and estimate their
    /// noise level: images/ with attached noise plus noise.csv.
    NoiseEstimate {
        /// Directory holding frames/ and offsets.csv.
        #[arg(long, short = 'i')]
        input: PathBuf,

        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
}

fn cli_n_w(s: &str) -> Result<f64, String> {
    parse_n_w(s).map_err(|e| e.to_string())
}

fn resolve(args: &ConfigArgs) -> anyhow::Result<(ResolvedRun, PathBuf)> {
    let mut config = RunConfig::load(&args.config)
        .with_context(|| format!("loading {}", args.config.display()))?;
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    if let Some(out) = &args.out {
        config.out_dir = Some(out.clone());
    }
    let resolved = config.resolve().context("validating config")?;
    let out_dir = resolved
        .out_dir
        .clone()
        .ok_or_else(|| anyhow::anyhow!("no output directory: set out_dir in the config or pass --out"))?;
    Ok((resolved, out_dir))
}

fn threads_from(cli: &Cli) -> usize {
    if cli.threads != 0 {
        return cli.threads;
    }
    std::env::var("WNTA_THREADS")
        .ok()
        .and_then(|v| v.parse().ok())
        .unwrap_or(0)
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    if let Err(err) = run() {
        eprintln!("error: {err:#}");
        std::process::exit(1);
    }
}

fn run() -> anyhow::Result<()> {
    let cli = Cli::parse();
    pipeline::configure_threads(threads_from(&cli));

    match &cli.command {
        Command::Simulate(args) => {
            let (resolved, out_dir) = resolve(args)?;
            let ensemble = pipeline::run_simulate(&resolved, &out_dir)?;
            println!(
                "simulated {} particles x {} frames -> {}",
                ensemble.records.len(),
                resolved.ensemble.n_steps,
                out_dir.display()
            );
        }
        Command::Analyze { config, input, n_w } => {
            let (mut resolved, out_dir) = resolve(config)?;
            if let Some(n_w) = n_w {
                resolved.n_w = *n_w;
                resolved.config.analysis.n_w = *n_w;
            }
            let analysis = pipeline::run_analyze(&resolved, input, &out_dir)?;
            let valid = analysis.rows.iter().filter(|r| r.weighted.is_valid()).count();
            println!(
                "analyzed {} particles ({} valid weighted estimates) -> {}",
                analysis.rows.len(),
                valid,
                out_dir.display()
            );
        }
        Command::Calibrate(args) => {
            let (resolved, out_dir) = resolve(args)?;
            let output = pipeline::run_calibrate(&resolved, &out_dir)?;
            let best = output.optimal_n_w;
            let shown = if best.is_infinite() {
                "inf".to_string()
            } else {
                format!("{best}")
            };
            println!(
                "swept {} exponents x {} repetitions, optimum n_w = {shown} -> {}",
                output.sweep.grid.len(),
                output.sweep.repetitions,
                out_dir.display()
            );
            if let Some(model) = &output.snr_model {
                println!(
                    "SNR model: n_w = {:.4} / SNR + {:.4} (R^2 = {:.3})",
                    model.slope, model.intercept, model.r_squared
                );
            }
        }
        Command::Refindex {
            config,
            sizes,
            images,
        } => {
            let (resolved, out_dir) = resolve(config)?;
            let rows = pipeline::run_refindex(&resolved, sizes, images, &out_dir)?;
            let skipped = rows.iter().filter(|r| r.estimate.is_none()).count();
            println!(
                "wrote {} refractive-index rows ({} warning rows) -> {}",
                rows.len(),
                skipped,
                out_dir.display()
            );
        }
        Command::NoiseEstimate { input, out } => {
            if !input.join("frames").is_dir() {
                bail!("{} has no frames/ directory", input.display());
            }
            let summary = pipeline::run_noise_estimate(input, out)?;
            println!(
                "estimated noise for {} particles -> {}",
                summary.len(),
                out.display()
            );
        }
    }
    Ok(())
}
