//! Multi-initialization training campaigns.
//!
//! One campaign trains `n_seeds` policies on the same scenario, each from an
//! independent parameter initialization derived deterministically from the
//! master seed. Every seed emits a raw training-curve CSV, a smoothed curve
//! CSV, a wall-clock sidecar, and a checkpoint; the campaign closes with a
//! `manifest.json` tying the artifacts to the exact configuration that
//! produced them. A seed whose training aborts (e.g. critic divergence) is
//! marked failed in the manifest — with its partial artifacts kept — and the
//! rest of the campaign proceeds.

use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::agents::{train, TrainOptions};
use crate::error::Result;
use crate::seeding::campaign_run_seed;

use super::checkpoint::Checkpoint;
use super::csvio::{fmt_f64, write_csv};
use super::ExperimentConfig;

/// Record of one campaign: the config snapshot, the code version, and what
/// every seed produced. Serialized as `manifest.json` in the output
/// directory; all paths are relative to that directory.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    /// Version tag of the code that produced the artifacts.
    pub code_version: String,
    /// Exact configuration the campaign ran with.
    pub config: ExperimentConfig,
    /// Per-seed outcomes, in seed order.
    pub seeds: Vec<SeedOutcome>,
    /// Campaign wall-clock total in seconds (not covered by determinism
    /// guarantees).
    pub total_wall_clock_secs: f64,
}

/// What one training seed produced.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SeedOutcome {
    /// Index within the campaign, `0..n_seeds`.
    pub seed_index: usize,
    /// Derived master seed this run's streams were keyed by.
    pub run_seed: u64,
    /// `None` on success; the abort reason when training stopped early.
    pub failed: Option<String>,
    /// Training iterations that completed before finishing or aborting.
    pub iterations_completed: usize,
    /// Final smoothed reward, if at least one iteration completed.
    pub final_smoothed_reward_bps: Option<f64>,
    /// Raw training curve (iteration metrics, full precision).
    pub curve_raw_csv: Option<String>,
    /// Smoothed reward curve.
    pub curve_smoothed_csv: Option<String>,
    /// Per-iteration wall-clock sidecar (excluded from determinism
    /// guarantees).
    pub timing_csv: Option<String>,
    /// Final (or last-reached) parameters.
    pub checkpoint: Option<String>,
    /// Wall-clock seconds this seed took (not covered by determinism
    /// guarantees).
    pub wall_clock_secs: f64,
}

impl RunManifest {
    /// File name of the manifest inside the output directory.
    pub const FILE_NAME: &'static str = "manifest.json";

    /// Writes `manifest.json` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        let text =
            serde_json::to_string_pretty(self).expect("manifest serialization cannot fail") + "\n";
        std::fs::write(dir.join(Self::FILE_NAME), text)?;
        Ok(())
    }

    /// Reads a manifest written by [`RunManifest::save`].
    pub fn load(dir: &Path) -> Result<RunManifest> {
        let text = std::fs::read_to_string(dir.join(Self::FILE_NAME))?;
        serde_json::from_str(&text)
            .map_err(|e| crate::error::Error::Parse(format!("manifest.json: {e}")))
    }
}

/// Trains `cfg.n_seeds` policies — seed `i` under the derived master seed
/// `campaign_run_seed(cfg.master_seed, i)` — writing per-seed curves and
/// checkpoints plus a closing `manifest.json` into `cfg.output_dir`.
pub fn run_training_campaign(cfg: &ExperimentConfig) -> Result<RunManifest> {
    cfg.validate()?;
    std::fs::create_dir_all(&cfg.output_dir)?;
    let started = Instant::now();
    let seeds: Vec<SeedOutcome> = (0..cfg.n_seeds)
        .into_par_iter()
        .map(|i| run_one_seed(cfg, i))
        .collect::<Result<Vec<_>>>()?;
    let manifest = RunManifest {
        code_version: env!("CARGO_PKG_VERSION").to_owned(),
        config: cfg.clone(),
        seeds,
        total_wall_clock_secs: started.elapsed().as_secs_f64(),
    };
    manifest.save(&cfg.output_dir)?;
    Ok(manifest)
}

fn run_one_seed(cfg: &ExperimentConfig, seed_index: usize) -> Result<SeedOutcome> {
    let run_seed = campaign_run_seed(cfg.master_seed, seed_index as u64);
    let options = TrainOptions {
        constraint_mode: cfg.constraint_mode,
        fixed_channels: None,
    };
    let started = Instant::now();
    let outcome = train(
        cfg.scheme,
        &cfg.network,
        &cfg.trpo,
        cfg.iterations,
        &options,
        run_seed,
    );
    let wall_clock_secs = started.elapsed().as_secs_f64();

    let out = match outcome {
        Ok(out) => out,
        Err(e) => {
            // Nothing usable was produced; mark the seed and move on.
            return Ok(SeedOutcome {
                seed_index,
                run_seed,
                failed: Some(e.to_string()),
                iterations_completed: 0,
                final_smoothed_reward_bps: None,
                curve_raw_csv: None,
                curve_smoothed_csv: None,
                timing_csv: None,
                checkpoint: None,
                wall_clock_secs,
            });
        }
    };

    let raw_name = format!("seed{seed_index:02}_curve_raw.csv");
    let smooth_name = format!("seed{seed_index:02}_curve_smoothed.csv");
    let timing_name = format!("seed{seed_index:02}_timing.csv");
    let ck_name = format!("seed{seed_index:02}_checkpoint.txt");

    let raw_rows: Vec<Vec<String>> = out
        .log
        .iter()
        .map(|r| {
            vec![
                r.iteration.to_string(),
                fmt_f64(r.mean_reward_bps),
                fmt_f64(r.mean_kl),
                fmt_f64(r.surrogate),
                r.j_used.to_string(),
                r.accepted.to_string(),
                fmt_f64(r.critic_loss),
            ]
        })
        .collect();
    write_csv(
        &cfg.output_dir.join(&raw_name),
        &[
            "iteration",
            "mean_reward_bps",
            "mean_kl",
            "surrogate",
            "j_used",
            "accepted",
            "critic_loss",
        ],
        &raw_rows,
    )?;

    let smooth_rows: Vec<Vec<String>> = out
        .log
        .iter()
        .map(|r| vec![r.iteration.to_string(), fmt_f64(r.smoothed_reward_bps)])
        .collect();
    write_csv(
        &cfg.output_dir.join(&smooth_name),
        &["iteration", "smoothed_reward_bps"],
        &smooth_rows,
    )?;

    let timing_rows: Vec<Vec<String>> = out
        .log
        .iter()
        .map(|r| vec![r.iteration.to_string(), fmt_f64(r.wall_clock_ms)])
        .collect();
    write_csv(
        &cfg.output_dir.join(&timing_name),
        &["iteration", "wall_clock_ms"],
        &timing_rows,
    )?;

    let ck = Checkpoint::from_training(cfg.scheme, cfg.network.pmax_dbm, cfg.constraint_mode, &out);
    ck.save(&cfg.output_dir.join(&ck_name))?;

    Ok(SeedOutcome {
        seed_index,
        run_seed,
        failed: out.aborted,
        iterations_completed: out.log.len(),
        final_smoothed_reward_bps: out.log.last().map(|r| r.smoothed_reward_bps),
        curve_raw_csv: Some(raw_name),
        curve_smoothed_csv: Some(smooth_name),
        timing_csv: Some(timing_name),
        checkpoint: Some(ck_name),
        wall_clock_secs,
    })
}
