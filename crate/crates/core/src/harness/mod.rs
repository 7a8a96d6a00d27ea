//! Reproducible experiment orchestration behind the `cellpower` CLI.
//!
//! The harness turns a single [`ExperimentConfig`] plus a master seed into
//! training campaigns, evaluation tables, transmit-budget sweeps, timing
//! tables, and information-exchange reports, persisting every artifact under
//! the configured output directory:
//!
//! * [`run_training_campaign`] — `n_seeds` independent training runs with
//!   per-seed curve CSVs, checkpoints, and a JSON [`RunManifest`];
//! * [`run_evaluation`] — policies and classical baselines compared on a
//!   shared set of channel realizations;
//! * [`run_power_sweep`] — the same comparison across transmit-power
//!   budgets, rescaling policy outputs by `Pmax_new / Pmax_train`;
//! * [`run_timing`] — single-threaded per-decision latency medians;
//! * [`exchange_accounting`] — exact per-slot signaling counts per scheme.
//!
//! Every output file is a pure function of `(config, master_seed)` except
//! the wall-clock measurements, which are quarantined in `*_timing.csv`
//! sidecars and the manifest's wall-clock fields so that everything else
//! reruns byte-identically.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::agents::SchemeTag;
use crate::error::{Error, Result};
use crate::netmodel::{ConstraintMode, NetworkConfig};
use crate::trpo::TrpoConfig;

mod accounting;
mod campaign;
mod checkpoint;
mod config;
mod csvio;
mod evaluation;
mod timing;

pub use accounting::{
    exchange_accounting, format_accounting_table, write_accounting_csv, ExchangeReport,
};
pub use campaign::{run_training_campaign, RunManifest, SeedOutcome};
pub use checkpoint::{Checkpoint, LoadedPolicy};
pub use csvio::{fmt_f64, fmt_mbps, parse_f64, read_csv, write_csv};
pub use evaluation::{
    format_evaluation_table, format_sweep_table, run_evaluation, run_power_sweep,
    write_evaluation_files, write_sweep_files, BaselineKind, EvalReport, MethodEval, SweepPoint,
};
pub use timing::{format_timing_table, run_timing, write_timing_csv, TimingRow};

/// Everything one experiment needs: the scenario, the optimizer, the
/// protocol sizes, and the master seed all outputs derive from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    /// Cell/channel scenario.
    pub network: NetworkConfig,
    /// Policy/critic optimizer hyper-parameters.
    pub trpo: TrpoConfig,
    /// Which power-control scheme to train.
    pub scheme: SchemeTag,
    /// Training iterations per seed.
    pub iterations: usize,
    /// Independent parameter initializations trained per campaign.
    pub n_seeds: usize,
    /// Channel realizations per evaluation run.
    pub eval_realizations: usize,
    /// Transmit-budget grid for `sweep`, in dBm.
    pub pmax_sweep_dbm: Vec<f64>,
    /// Power-feasibility interpretation used for training and rollouts.
    pub constraint_mode: ConstraintMode,
    /// Directory receiving every output file.
    pub output_dir: PathBuf,
    /// Root seed; every random stream in the experiment derives from it.
    pub master_seed: u64,
}

impl Default for ExperimentConfig {
    /// Desk-scale profile of the benchmark scenario: the three-cell network
    /// with a small policy/critic pair and batch size, sized so a full
    /// campaign runs in minutes on a laptop.
    fn default() -> Self {
        ExperimentConfig {
            network: NetworkConfig::three_cell(),
            trpo: TrpoConfig {
                hidden_layers: 2,
                hidden_units: 64,
                episodes_per_iter: 100,
                ..TrpoConfig::default()
            },
            scheme: SchemeTag::Centralized,
            iterations: 300,
            n_seeds: 1,
            eval_realizations: 500,
            pmax_sweep_dbm: vec![20.0, 25.0, 30.0, 35.0, 40.0, 43.0, 45.0, 50.0],
            constraint_mode: ConstraintMode::PerUser,
            output_dir: PathBuf::from("out"),
            master_seed: 1,
        }
    }
}

impl ExperimentConfig {
    /// Checks the nested configs plus the harness-level fields.
    pub fn validate(&self) -> Result<()> {
        self.network.validate()?;
        self.trpo.validate()?;
        if self.n_seeds == 0 {
            return Err(Error::Config("n_seeds must be at least 1".into()));
        }
        if self.eval_realizations == 0 {
            return Err(Error::Config("eval_realizations must be at least 1".into()));
        }
        for &p in &self.pmax_sweep_dbm {
            if !p.is_finite() || !(0.0..=60.0).contains(&p) {
                return Err(Error::Config(format!(
                    "sweep budget {p} dBm is outside the sane range [0, 60] dBm"
                )));
            }
        }
        if self.output_dir.as_os_str().is_empty() {
            return Err(Error::Config("output_dir must not be empty".into()));
        }
        Ok(())
    }
}

/// Exponentially weighted moving average with weight `w` on the newest
/// sample: `s[0] = x[0]`, `s[n] = w·x[n] + (1−w)·s[n−1]`. `w = 1` is the
/// identity; the output always stays within the input's min/max envelope.
pub fn smooth_curve(raw: &[f64], w: f64) -> Vec<f64> {
    assert!(
        w > 0.0 && w <= 1.0,
        "smoothing weight must lie in (0, 1], got {w}"
    );
    let mut smoothed = Vec::with_capacity(raw.len());
    let mut prev = f64::NAN;
    for (n, &x) in raw.iter().enumerate() {
        let s = if n == 0 { x } else { w * x + (1.0 - w) * prev };
        smoothed.push(s);
        prev = s;
    }
    smoothed
}
