//! Command-line front end for training, evaluating, and benchmarking
//! transmit-power-control policies.
//!
//! Every subcommand starts from an [`ExperimentConfig`] — the defaults, or a
//! flat `key = value` file given with `--config` — and applies the override
//! flags on top. Results land in the configured output directory as CSV
//! files (plus a JSON manifest for training campaigns) and are echoed to
//! stdout as human-readable tables.
//!
//! The optional `CELLPOWER_THREADS` environment variable caps the worker
//! pool used for rollouts and evaluation; when unset, all cores are used.
//! Timing benchmarks always measure on a single thread regardless.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use cellpower::agents::SchemeTag;
use cellpower::error::{Error, Result};
use cellpower::harness::{
    exchange_accounting, fmt_mbps, format_accounting_table, format_evaluation_table,
    format_sweep_table, format_timing_table, run_evaluation, run_power_sweep, run_timing,
    run_training_campaign, write_accounting_csv, write_evaluation_files, write_sweep_files,
    write_timing_csv, BaselineKind, Checkpoint, ExperimentConfig, RunManifest,
};

/// Name of the environment variable selecting the worker-thread count.
const THREADS_ENV_VAR: &str = "CELLPOWER_THREADS";

#[derive(Parser, Debug)]
#[command(
    name = "cellpower",
    version,
    about = "Train and benchmark transmit-power-control policies for multi-cell downlink networks"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Flags shared by every subcommand. File values load first; flags override.
#[derive(Args, Debug, Clone, Default)]
struct Common {
    /// Flat `key = value` experiment-configuration file.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Directory for output files (overrides the config value).
    #[arg(long, value_name = "DIR")]
    output_dir: Option<PathBuf>,
    /// Master seed (overrides the config value).
    #[arg(long, value_name = "SEED")]
    seed: Option<u64>,
    /// Power-control scheme: centralized | partial | full.
    #[arg(long, value_name = "SCHEME", value_parser = parse_scheme_flag)]
    scheme: Option<SchemeTag>,
    /// Training-iteration count (overrides the config value).
    #[arg(long, value_name = "N")]
    iterations: Option<usize>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run a training campaign: one run per seed, shared scenario.
    ///
    /// Writes per-seed raw/smoothed curve CSVs, a wall-clock sidecar, a
    /// final checkpoint, and `manifest.json` into the output directory.
    Train {
        #[command(flatten)]
        common: Common,
    },
    /// Compare checkpointed policies and classical baselines on shared
    /// channel realizations.
    Evaluate {
        #[command(flatten)]
        common: Common,
        /// Trained-policy checkpoint file; repeat for several policies.
        #[arg(long = "checkpoint", value_name = "PATH", required = true)]
        checkpoints: Vec<PathBuf>,
        /// Comma-separated baselines (max_power, random, wmmse, fp).
        #[arg(long, value_delimiter = ',', value_parser = parse_baseline_flag)]
        baselines: Option<Vec<BaselineKind>>,
    },
    /// Evaluate the classical baselines alone on shared realizations.
    Baselines {
        #[command(flatten)]
        common: Common,
        /// Comma-separated baselines (max_power, random, wmmse, fp).
        #[arg(long, value_delimiter = ',', value_parser = parse_baseline_flag)]
        baselines: Option<Vec<BaselineKind>>,
    },
    /// Rerun the comparison across the configured power-budget sweep,
    /// rescaling policy outputs onto each budget.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Trained-policy checkpoint file; repeat for several policies.
        #[arg(long = "checkpoint", value_name = "PATH", required = true)]
        checkpoints: Vec<PathBuf>,
        /// Comma-separated baselines (max_power, random, wmmse, fp).
        #[arg(long, value_delimiter = ',', value_parser = parse_baseline_flag)]
        baselines: Option<Vec<BaselineKind>>,
    },
    /// Benchmark per-decision wall-clock time, single-threaded.
    Timing {
        #[command(flatten)]
        common: Common,
        /// Trained-policy checkpoint file; repeat for several policies.
        #[arg(long = "checkpoint", value_name = "PATH")]
        checkpoints: Vec<PathBuf>,
        /// Comma-separated baselines (max_power, random, wmmse, fp).
        #[arg(long, value_delimiter = ',', value_parser = parse_baseline_flag)]
        baselines: Option<Vec<BaselineKind>>,
    },
    /// Report the exact per-slot information-exchange counts of all three
    /// schemes for the configured scenario.
    Accounting {
        #[command(flatten)]
        common: Common,
    },
}

fn parse_scheme_flag(s: &str) -> Result<SchemeTag> {
    SchemeTag::parse(s)
}

fn parse_baseline_flag(s: &str) -> Result<BaselineKind> {
    BaselineKind::parse(s.trim())
}

impl Common {
    /// Loads the config file (or the defaults) and applies the override
    /// flags, returning a validated configuration.
    fn resolve(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(path) => ExperimentConfig::load(path)?,
            None => ExperimentConfig::default(),
        };
        if let Some(dir) = &self.output_dir {
            cfg.output_dir = dir.clone();
        }
        if let Some(seed) = self.seed {
            cfg.master_seed = seed;
        }
        if let Some(scheme) = self.scheme {
            cfg.scheme = scheme;
        }
        if let Some(iterations) = self.iterations {
            cfg.iterations = iterations;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Reads the thread-count environment variable and sizes the global worker
/// pool accordingly. Unset means "all cores" (the library default).
fn configure_thread_pool() -> Result<()> {
    let Ok(raw) = std::env::var(THREADS_ENV_VAR) else {
        return Ok(());
    };
    let threads: usize = raw.trim().parse().ok().filter(|&n| n >= 1).ok_or_else(|| {
        Error::Config(format!(
            "{THREADS_ENV_VAR} must be a positive integer, got `{raw}`"
        ))
    })?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .map_err(|e| Error::Config(format!("could not size the worker pool: {e}")))
}

fn load_checkpoints(paths: &[PathBuf]) -> Result<Vec<(String, Checkpoint)>> {
    let mut out = Vec::with_capacity(paths.len());
    for path in paths {
        let name = path
            .file_stem()
            .and_then(|s| s.to_str())
            .map(str::to_owned)
            .ok_or_else(|| {
                Error::Config(format!(
                    "checkpoint path `{}` has no usable file name",
                    path.display()
                ))
            })?;
        let ck = Checkpoint::load(path)?;
        out.push((name, ck));
    }
    Ok(out)
}

fn baselines_or_all(flag: Option<Vec<BaselineKind>>) -> Vec<BaselineKind> {
    flag.unwrap_or_else(|| BaselineKind::ALL.to_vec())
}

fn cmd_train(common: &Common) -> Result<()> {
    let cfg = common.resolve()?;
    let manifest = run_training_campaign(&cfg)?;
    print!("{}", format_campaign_summary(&manifest));
    println!(
        "wrote {}",
        cfg.output_dir.join(RunManifest::FILE_NAME).display()
    );
    Ok(())
}

/// One line per seed: index, run seed, progress, final smoothed reward, and
/// failure reason when the run aborted.
fn format_campaign_summary(manifest: &RunManifest) -> String {
    let mut out = String::new();
    out.push_str("seed  run_seed              iterations  final_smoothed  status\n");
    for seed in &manifest.seeds {
        let reward = seed
            .final_smoothed_reward_bps
            .map(|bps| format!("{} Mbps", fmt_mbps(bps)))
            .unwrap_or_else(|| "-".to_owned());
        let status = match &seed.failed {
            Some(reason) => format!("failed: {reason}"),
            None => "ok".to_owned(),
        };
        out.push_str(&format!(
            "{:<4}  {:<20}  {:<10}  {:<14}  {}\n",
            seed.seed_index, seed.run_seed, seed.iterations_completed, reward, status
        ));
    }
    out
}

fn cmd_evaluate(
    common: &Common,
    checkpoint_paths: &[PathBuf],
    baselines: Option<Vec<BaselineKind>>,
    prefix: &str,
) -> Result<()> {
    let cfg = common.resolve()?;
    let checkpoints = load_checkpoints(checkpoint_paths)?;
    let baselines = baselines_or_all(baselines);
    let report = run_evaluation(&cfg, &checkpoints, &baselines)?;
    let files = write_evaluation_files(&report, &cfg.output_dir, prefix)?;
    print!("{}", format_evaluation_table(&report));
    for f in files {
        println!("wrote {}", cfg.output_dir.join(f).display());
    }
    Ok(())
}

fn cmd_sweep(
    common: &Common,
    checkpoint_paths: &[PathBuf],
    baselines: Option<Vec<BaselineKind>>,
) -> Result<()> {
    let cfg = common.resolve()?;
    let checkpoints = load_checkpoints(checkpoint_paths)?;
    let baselines = baselines_or_all(baselines);
    let points = run_power_sweep(&cfg, &checkpoints, &baselines)?;
    let files = write_sweep_files(&points, &cfg.output_dir)?;
    print!("{}", format_sweep_table(&points));
    for f in files {
        println!("wrote {}", cfg.output_dir.join(f).display());
    }
    Ok(())
}

fn cmd_timing(
    common: &Common,
    checkpoint_paths: &[PathBuf],
    baselines: Option<Vec<BaselineKind>>,
) -> Result<()> {
    let cfg = common.resolve()?;
    let checkpoints = load_checkpoints(checkpoint_paths)?;
    let baselines = baselines_or_all(baselines);
    let rows = run_timing(&cfg, &checkpoints, &baselines)?;
    write_timing_csv(&rows, &cfg.output_dir)?;
    print!("{}", format_timing_table(&rows));
    println!("wrote {}", cfg.output_dir.join("timing.csv").display());
    Ok(())
}

fn cmd_accounting(common: &Common) -> Result<()> {
    let cfg = common.resolve()?;
    let reports: Vec<_> = SchemeTag::ALL
        .iter()
        .map(|&scheme| exchange_accounting(&cfg.network, scheme))
        .collect();
    write_accounting_csv(&reports, &cfg.output_dir)?;
    print!("{}", format_accounting_table(&reports));
    println!("wrote {}", cfg.output_dir.join("accounting.csv").display());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    configure_thread_pool()?;
    match cli.command {
        Command::Train { common } => cmd_train(&common),
        Command::Evaluate {
            common,
            checkpoints,
            baselines,
        } => cmd_evaluate(&common, &checkpoints, baselines, "evaluation"),
        Command::Baselines { common, baselines } => {
            cmd_evaluate(&common, &[], baselines, "baselines")
        }
        Command::Sweep {
            common,
            checkpoints,
            baselines,
        } => cmd_sweep(&common, &checkpoints, baselines),
        Command::Timing {
            common,
            checkpoints,
            baselines,
        } => cmd_timing(&common, &checkpoints, baselines),
        Command::Accounting { common } => cmd_accounting(&common),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
