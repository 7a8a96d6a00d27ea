//! Single-threaded per-decision latency measurement.
//!
//! Every method is timed on the same pre-generated channel realizations
//! (generation itself is outside the clock), one decision after another on
//! the calling thread, so the numbers compare allocation *rules*, not
//! scheduler luck. Reported per decision:
//!
//! * centralized policy — one full forward pass (the slot's single decision);
//! * partially decentralized policy — the whole sequential chain of `B`
//!   local passes, since the base stations must act one after another;
//! * fully decentralized policy — one local pass (all `B` run concurrently
//!   in deployment), measured as the episode total divided by `B`;
//! * solvers — one complete solve; max/random power — the direct fill.
//!
//! Wall-clock output is inherently non-reproducible, so timing tables live
//! in `timing.csv` files that are excluded from byte-identity guarantees.

use std::path::Path;
use std::time::Instant;

use crate::agents::{nearest_rank_percentile, play_episode_timed, RolloutOptions, SchemeTag};
use crate::baselines::{
    fp_allocation, max_power, random_power, wmmse_allocation, DEFAULT_SOLVER_MAX_ITERS,
    DEFAULT_SOLVER_TOL,
};
use crate::error::Result;
use crate::netmodel::{sample_channels, sample_geometry, ChannelTensor, NetworkConfig};
use crate::seeding::{stream, Stream};

use super::checkpoint::Checkpoint;
use super::csvio::{fmt_f64, write_csv};
use super::evaluation::BaselineKind;
use super::ExperimentConfig;

/// Fewest realizations a timing run may use.
pub const MIN_TIMING_REALIZATIONS: usize = 100;

/// One method's latency row.
#[derive(Debug, Clone)]
pub struct TimingRow {
    pub method: String,
    pub realizations: usize,
    pub median_ms: f64,
    pub mean_ms: f64,
}

fn summarize(method: &str, mut samples_ms: Vec<f64>) -> TimingRow {
    let n = samples_ms.len();
    let mean = samples_ms.iter().sum::<f64>() / n as f64;
    samples_ms.sort_by(|a, b| a.total_cmp(b));
    TimingRow {
        method: method.to_owned(),
        realizations: n,
        median_ms: nearest_rank_percentile(&samples_ms, 0.5),
        mean_ms: mean,
    }
}

/// Times each checkpointed policy and baseline over at least
/// [`MIN_TIMING_REALIZATIONS`] shared realizations (more when
/// `cfg.eval_realizations` is larger), single-threaded, excluding channel
/// generation. Rows appear in argument order: policies first.
pub fn run_timing(
    cfg: &ExperimentConfig,
    checkpoints: &[(String, Checkpoint)],
    baselines: &[BaselineKind],
) -> Result<Vec<TimingRow>> {
    cfg.validate()?;
    let n = cfg.eval_realizations.max(MIN_TIMING_REALIZATIONS);
    let net = &cfg.network;
    let channels: Vec<ChannelTensor> = (0..n)
        .map(|i| {
            let mut rng = stream(cfg.master_seed, Stream::EvalChannel, i as u64, 0);
            let geom = sample_geometry(net, &mut rng)?;
            Ok(sample_channels(&geom, net, &mut rng))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut rows = Vec::with_capacity(checkpoints.len() + baselines.len());
    for (idx, (name, ck)) in checkpoints.iter().enumerate() {
        rows.push(time_policy(
            name,
            ck,
            net,
            &channels,
            cfg.master_seed,
            16 + idx as u64,
        )?);
    }
    for &kind in baselines {
        rows.push(time_baseline(kind, net, &channels, cfg.master_seed)?);
    }
    Ok(rows)
}

fn time_policy(
    name: &str,
    ck: &Checkpoint,
    net: &NetworkConfig,
    channels: &[ChannelTensor],
    master_seed: u64,
    method_tag: u64,
) -> Result<TimingRow> {
    let loaded = ck.instantiate(net)?;
    let opts = RolloutOptions {
        sigma_floor: true,
        power_scale: ck.rescale_factor(net),
        constraint_mode: ck.constraint_mode,
    };
    let passes = match ck.scheme {
        // The sequential chain is the slot's latency; concurrent local
        // passes count as one.
        SchemeTag::Centralized | SchemeTag::PartiallyDecentralized => 1.0,
        SchemeTag::FullyDecentralized => net.num_cells as f64,
    };
    // Warm-up pass to fault in code and caches before measuring.
    let mut warmup_rng = stream(master_seed, Stream::EvalAction, 0, method_tag);
    play_episode_timed(
        &loaded.agent,
        &loaded.theta,
        &channels[0],
        net,
        &loaded.norm,
        &opts,
        &mut warmup_rng,
    )?;

    let mut samples_ms = Vec::with_capacity(channels.len());
    for (i, h) in channels.iter().enumerate() {
        let mut rng = stream(master_seed, Stream::EvalAction, i as u64, method_tag);
        let (_, secs) = play_episode_timed(
            &loaded.agent,
            &loaded.theta,
            h,
            net,
            &loaded.norm,
            &opts,
            &mut rng,
        )?;
        samples_ms.push(secs * 1e3 / passes);
    }
    Ok(summarize(name, samples_ms))
}

fn time_baseline(
    kind: BaselineKind,
    net: &NetworkConfig,
    channels: &[ChannelTensor],
    master_seed: u64,
) -> Result<TimingRow> {
    let run = |h: &ChannelTensor, i: usize| -> Result<f64> {
        let mut rng = stream(master_seed, Stream::EvalAction, i as u64, 8);
        let started = Instant::now();
        match kind {
            BaselineKind::MaxPower => {
                std::hint::black_box(max_power(net));
            }
            BaselineKind::Random => {
                std::hint::black_box(random_power(net, &mut rng));
            }
            BaselineKind::Wmmse => {
                std::hint::black_box(wmmse_allocation(
                    h,
                    net,
                    DEFAULT_SOLVER_MAX_ITERS,
                    DEFAULT_SOLVER_TOL,
                )?);
            }
            BaselineKind::Fp => {
                std::hint::black_box(fp_allocation(
                    h,
                    net,
                    DEFAULT_SOLVER_MAX_ITERS,
                    DEFAULT_SOLVER_TOL,
                )?);
            }
        }
        Ok(started.elapsed().as_secs_f64())
    };
    run(&channels[0], 0)?; // warm-up
    let mut samples_ms = Vec::with_capacity(channels.len());
    for (i, h) in channels.iter().enumerate() {
        samples_ms.push(run(h, i)? * 1e3);
    }
    Ok(summarize(kind.as_str(), samples_ms))
}

/// Writes `timing.csv` (full precision; excluded from determinism
/// guarantees).
pub fn write_timing_csv(rows: &[TimingRow], dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let csv_rows: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                r.method.clone(),
                r.realizations.to_string(),
                fmt_f64(r.median_ms),
                fmt_f64(r.mean_ms),
            ]
        })
        .collect();
    write_csv(
        &dir.join("timing.csv"),
        &["method", "realizations", "median_ms", "mean_ms"],
        &csv_rows,
    )
}

/// Human-readable latency table in milliseconds.
pub fn format_timing_table(rows: &[TimingRow]) -> String {
    let mut s = format!(
        "{:<24} {:>6} {:>14} {:>14}\n",
        "method", "n", "median_ms", "mean_ms"
    );
    for r in rows {
        s.push_str(&format!(
            "{:<24} {:>6} {:>14.6} {:>14.6}\n",
            r.method, r.realizations, r.median_ms, r.mean_ms
        ));
    }
    s
}
