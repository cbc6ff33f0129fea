//! `forage` — staged pipeline from raw GPS pings and a food-outlet catalog
//! to per-device food-acquisition metrics and plot-ready aggregates.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use forage::config::PipelineConfig;
use forage::pipeline;

#[derive(Parser)]
#[command(
    name = "forage",
    version,
    about = "Food-acquisition metrics from GPS ping streams",
    long_about = "Staged pipeline: synthesize or ingest a ping stream, detect staypoints, \
                  infer homes, attribute outlet visits, and emit metrics, aggregates, \
                  robustness sweeps, and a ground-truth evaluation. Stages communicate \
                  through files in the output directory, so each can be re-run alone."
)]
struct Cli {
    /// Config JSON; omitted keys take documented defaults.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,

    /// Output directory (created if absent).
    #[arg(long, global = true, default_value = "out", value_name = "DIR")]
    out: PathBuf,

    /// Worker threads; any value produces byte-identical outputs.
    #[arg(long, global = true, value_name = "N")]
    workers: Option<usize>,

    /// Override the study timezone (IANA id, e.g. America/New_York).
    #[arg(long, global = true, value_name = "TZID")]
    timezone: Option<String>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the seeded synthetic world: pings, outlets, roads, tracts,
    /// and ground truth.
    Synth {
        /// Override the generator seed.
        #[arg(long, value_name = "S")]
        seed: Option<u64>,
    },
    /// Parse and filter the raw ping stream into clean per-device tracks.
    Ingest,
    /// Infer proxy home locations from nighttime ping concentrations.
    Homes,
    /// Detect staypoints and link trip origins.
    Stays,
    /// Attribute food-candidate stays to outlets.
    Visits {
        /// Keep only visits to primary food-selling outlets.
        #[arg(long)]
        primary_only: bool,
    },
    /// Compute per-device metrics and the population summary.
    Metrics {
        /// Restrict analysis to primary food-selling outlets.
        #[arg(long)]
        primary_only: bool,
    },
    /// Emit plot-ready temporal, tract, histogram, and density tables.
    Aggregate,
    /// Run the attribution-radius and outlet-inclusion robustness sweeps.
    Sweep {
        /// Comma-separated uniform radii in meters (e.g. 50,100,150,200).
        #[arg(long, value_delimiter = ',', value_name = "M,..")]
        radii: Option<Vec<f64>>,
    },
    /// Score pipeline outputs against the synthetic ground truth.
    Evaluate,
    /// Chain ingest → homes → stays → visits → metrics → aggregate.
    All {
        /// Restrict visits and metrics to primary food-selling outlets.
        #[arg(long)]
        primary_only: bool,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(
        env_logger::Env::default().filter_or("FORAGE_LOG", "warn"),
    )
    .format_timestamp(None)
    .init();

    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("forage: error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let mut cfg = match &cli.config {
        Some(path) => PipelineConfig::load(path)?,
        None => PipelineConfig::default(),
    };

    // Flag overrides land on the config before it is re-validated and
    // echoed, so provenance reflects what actually ran.
    if let Some(workers) = cli.workers {
        cfg.workers = workers;
    }
    if let Some(tz) = &cli.timezone {
        cfg.study.timezone = tz.clone();
    }
    match &cli.command {
        Command::Synth { seed: Some(s) } => cfg.synth.seed = *s,
        Command::Sweep { radii: Some(r) } => cfg.sweep.radii_m = r.clone(),
        Command::Visits { primary_only: true }
        | Command::Metrics { primary_only: true }
        | Command::All { primary_only: true } => cfg.metrics.primary_only = true,
        _ => {}
    }
    cfg.validate()?;

    // One global pool; zero means rayon's default (all cores).
    rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers)
        .build_global()
        .expect("global thread pool initialized once");

    let out = cli.out.as_path();
    match cli.command {
        Command::Synth { .. } => pipeline::run_synth(&cfg, out)?,
        Command::Ingest => pipeline::run_ingest(&cfg, out)?,
        Command::Homes => pipeline::run_homes(&cfg, out)?,
        Command::Stays => pipeline::run_stays(&cfg, out)?,
        Command::Visits { .. } => pipeline::run_visits(&cfg, out)?,
        Command::Metrics { .. } => pipeline::run_metrics(&cfg, out)?,
        Command::Aggregate => pipeline::run_aggregate(&cfg, out)?,
        Command::Sweep { .. } => pipeline::run_sweep(&cfg, out)?,
        Command::Evaluate => pipeline::run_evaluate(&cfg, out)?,
        Command::All { .. } => pipeline::run_all(&cfg, out)?,
    }
    Ok(())
}
