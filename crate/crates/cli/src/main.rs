use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::LazyLock;

use clap::{Parser, Subcommand};

mod commands;
mod config;
mod error;
mod summary;

use config::RunConfig;
use error::CliError;

static VERSION: LazyLock<String> =
    LazyLock::new(|| format!("{} (format {})", env!("CARGO_PKG_VERSION"), emitterscope::FORMAT_VERSION));

/// Widefield emitter characterization toolkit.
#[derive(Debug, Parser)]
#[command(name = "emitterscope", version = VERSION.as_str())]
struct Cli {
    /// Seed for every random draw of the run.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Output directory, created if missing.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// JSON run configuration with per-command sections.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Cap on worker threads. Results do not depend on it.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic scene and its frame stack, registry or image.
    Synth {
        /// sample-a, sample-b, registry, chip, custom or fiducial.
        #[arg(long)]
        template: Option<String>,
    },
    /// Extract a PLE peak catalog from a frame stack directory.
    Pipeline {
        stack: PathBuf,
        /// Skip laser-background normalization.
        #[arg(long)]
        no_normalize: bool,
        /// Band width, e.g. `10GHz`.
        #[arg(long)]
        bands: Option<String>,
    },
    /// Detect and decode fiducial codes in a WFS1 image.
    Qr {
        image: PathBuf,
        /// Module pitch in pixels.
        #[arg(long)]
        pitch: Option<f64>,
    },
    /// Cluster registry records (`experiment_*.json`) into tracks.
    Cluster {
        registry: PathBuf,
        #[arg(long)]
        threshold: Option<f64>,
        /// Spectral differences between two experiments, `I,J`.
        #[arg(long)]
        diff: Option<String>,
    },
    /// Population, linewidth and speed-up report.
    Stats {
        /// Peak catalog CSV.
        catalog: Option<PathBuf>,
        /// `N=.. gamma=.. Gamma=.. tc=.. tw=..`
        #[arg(long, num_args = 1.., value_name = "KEY=VALUE")]
        sf: Option<Vec<String>>,
    },
    /// Simulated serpentine chip scan over a scene JSON.
    Scan {
        scene: PathBuf,
        /// Stage step error (um, one sigma per axis).
        #[arg(long)]
        jitter: Option<f64>,
        /// Write each field image as a contrast-stretched 16-bit PNG.
        #[arg(long)]
        dump_fields: bool,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(CliError::Config("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Config(format!("thread pool: {e}")))?;
    }
    let mut inputs = Vec::new();
    let config = match &cli.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| CliError::input(path, e))?;
            inputs.push(summary::hash_input(path)?);
            RunConfig::from_json(&text)?
        }
        None => RunConfig::default(),
    };
    let mut ctx = commands::Context::new(cli.out.clone(), cli.seed, cli.threads, config, inputs)?;
    match cli.command {
        Command::Synth { template } => commands::synth(&mut ctx, template.as_deref()),
        Command::Pipeline {
            stack,
            no_normalize,
            bands,
        } => commands::pipeline(&mut ctx, &stack, no_normalize, bands.as_deref()),
        Command::Qr { image, pitch } => commands::qr(&mut ctx, &image, pitch),
        Command::Cluster {
            registry,
            threshold,
            diff,
        } => commands::cluster(&mut ctx, &registry, threshold, diff.as_deref()),
        Command::Stats { catalog, sf } => commands::stats(&mut ctx, catalog.as_deref(), sf.as_deref()),
        Command::Scan {
            scene,
            jitter,
            dump_fields,
        } => commands::scan(&mut ctx, &scene, jitter, dump_fields),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
