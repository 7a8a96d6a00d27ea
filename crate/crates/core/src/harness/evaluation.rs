//! Shared-realization evaluation of policies and classical baselines, plus
//! the transmit-budget sweep.
//!
//! Fairness contract: within one evaluation, realization `i` is the same
//! (geometry, fading) draw for every method — channels come from the stream
//! `(master, EvalChannel, i, 0)` regardless of method — while each method's
//! own randomness (sampling noise, random-power draws) comes from
//! `(master, EvalAction, i, method_tag)` with a per-method tag, so methods
//! can be added or removed without perturbing each other.

use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;

use crate::agents::{evaluate, EvalSummary, RolloutOptions};
use crate::baselines::{
    fp_allocation, max_power, random_power, wmmse_allocation, DEFAULT_SOLVER_MAX_ITERS,
    DEFAULT_SOLVER_TOL,
};
use crate::error::{Error, Result};
use crate::netmodel::{
    noise_power, sample_channels, sample_geometry, sum_rate, NetworkConfig, PowerMatrix,
};
use crate::seeding::{stream, Stream};

use super::checkpoint::Checkpoint;
use super::csvio::{fmt_f64, fmt_mbps, write_csv};
use super::ExperimentConfig;

/// Action-noise stream tags for the checkpointed policies start here;
/// baseline methods use the low tags.
const POLICY_TAG_BASE: u64 = 16;

/// The classical allocation rules policies are compared against.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BaselineKind {
    /// Every link at full budget.
    MaxPower,
    /// Uniform random power per link.
    Random,
    /// Weighted-MMSE iterative solver.
    Wmmse,
    /// Fractional-programming iterative solver.
    Fp,
}

impl BaselineKind {
    pub const ALL: [BaselineKind; 4] = [
        BaselineKind::MaxPower,
        BaselineKind::Random,
        BaselineKind::Wmmse,
        BaselineKind::Fp,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            BaselineKind::MaxPower => "max_power",
            BaselineKind::Random => "random",
            BaselineKind::Wmmse => "wmmse",
            BaselineKind::Fp => "fp",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "max_power" => Ok(BaselineKind::MaxPower),
            "random" => Ok(BaselineKind::Random),
            "wmmse" => Ok(BaselineKind::Wmmse),
            "fp" => Ok(BaselineKind::Fp),
            other => Err(Error::Parse(format!("unknown baseline `{other}`"))),
        }
    }

    fn method_tag(self) -> u64 {
        match self {
            BaselineKind::MaxPower => 1,
            BaselineKind::Random => 2,
            BaselineKind::Wmmse => 3,
            BaselineKind::Fp => 4,
        }
    }
}

/// One method's column of the comparison table.
#[derive(Debug, Clone)]
pub struct MethodEval {
    pub method: String,
    pub summary: EvalSummary,
}

/// All methods evaluated on one shared realization set.
#[derive(Debug, Clone)]
pub struct EvalReport {
    pub master_seed: u64,
    pub n_realizations: usize,
    pub methods: Vec<MethodEval>,
}

impl EvalReport {
    /// The column for `method`, if present.
    pub fn method(&self, method: &str) -> Option<&MethodEval> {
        self.methods.iter().find(|m| m.method == method)
    }
}

/// One budget point of the transmit-power sweep.
#[derive(Debug, Clone)]
pub struct SweepPoint {
    pub pmax_dbm: f64,
    pub methods: Vec<MethodEval>,
}

fn check_unique_names(
    checkpoints: &[(String, Checkpoint)],
    baselines: &[BaselineKind],
) -> Result<()> {
    let mut names: Vec<&str> = checkpoints.iter().map(|(n, _)| n.as_str()).collect();
    names.extend(baselines.iter().map(|b| b.as_str()));
    let mut seen = std::collections::HashSet::new();
    for n in names {
        if !seen.insert(n) {
            return Err(Error::Config(format!(
                "duplicate method name `{n}` in evaluation"
            )));
        }
    }
    Ok(())
}

/// Evaluates every checkpoint and baseline on the identical set of
/// `cfg.eval_realizations` channel realizations. Policies run with their
/// exploration noise floored and their raw outputs rescaled by the watt
/// ratio between `cfg.network`'s budget and their training budget.
pub fn run_evaluation(
    cfg: &ExperimentConfig,
    checkpoints: &[(String, Checkpoint)],
    baselines: &[BaselineKind],
) -> Result<EvalReport> {
    cfg.validate()?;
    check_unique_names(checkpoints, baselines)?;
    let mut methods = Vec::with_capacity(checkpoints.len() + baselines.len());
    for (idx, (name, ck)) in checkpoints.iter().enumerate() {
        let summary = evaluate_checkpoint(
            ck,
            &cfg.network,
            cfg.eval_realizations,
            cfg.master_seed,
            POLICY_TAG_BASE + idx as u64,
        )?;
        methods.push(MethodEval {
            method: name.clone(),
            summary,
        });
    }
    for &kind in baselines {
        let summary =
            evaluate_baseline(kind, &cfg.network, cfg.eval_realizations, cfg.master_seed)?;
        methods.push(MethodEval {
            method: kind.as_str().to_owned(),
            summary,
        });
    }
    Ok(EvalReport {
        master_seed: cfg.master_seed,
        n_realizations: cfg.eval_realizations,
        methods,
    })
}

fn evaluate_checkpoint(
    ck: &Checkpoint,
    net: &NetworkConfig,
    n_realizations: usize,
    master_seed: u64,
    method_tag: u64,
) -> Result<EvalSummary> {
    let loaded = ck.instantiate(net)?;
    let opts = RolloutOptions {
        sigma_floor: true,
        power_scale: ck.rescale_factor(net),
        constraint_mode: ck.constraint_mode,
    };
    evaluate(
        &loaded.agent,
        &loaded.theta,
        net,
        &loaded.norm,
        &opts,
        n_realizations,
        master_seed,
        method_tag,
    )
}

/// Evaluates one classical baseline on the shared realization streams. The
/// decision time covers only the allocation call, not channel generation or
/// the rate computation.
fn evaluate_baseline(
    kind: BaselineKind,
    net: &NetworkConfig,
    n_realizations: usize,
    master_seed: u64,
) -> Result<EvalSummary> {
    if n_realizations == 0 {
        return Err(Error::Config(
            "need at least one evaluation realization".into(),
        ));
    }
    let z = noise_power(net);
    let results: Vec<(f64, f64)> = (0..n_realizations)
        .into_par_iter()
        .map(|i| {
            let mut rng_ch = stream(master_seed, Stream::EvalChannel, i as u64, 0);
            let geom = sample_geometry(net, &mut rng_ch)?;
            let h = sample_channels(&geom, net, &mut rng_ch);
            let mut rng_act = stream(master_seed, Stream::EvalAction, i as u64, kind.method_tag());
            let started = Instant::now();
            let p: PowerMatrix = match kind {
                BaselineKind::MaxPower => max_power(net),
                BaselineKind::Random => random_power(net, &mut rng_act),
                BaselineKind::Wmmse => {
                    wmmse_allocation(&h, net, DEFAULT_SOLVER_MAX_ITERS, DEFAULT_SOLVER_TOL)?
                        .final_powers()
                        .clone()
                }
                BaselineKind::Fp => {
                    fp_allocation(&h, net, DEFAULT_SOLVER_MAX_ITERS, DEFAULT_SOLVER_TOL)?
                        .final_powers()
                        .clone()
                }
            };
            let secs = started.elapsed().as_secs_f64();
            Ok((sum_rate(&h, &p, z, net.bandwidth_hz), secs))
        })
        .collect::<Result<Vec<_>>>()?;
    let rates = results.iter().map(|(r, _)| *r).collect();
    let total_secs = results.iter().map(|(_, s)| *s).sum();
    EvalSummary::from_samples(rates, total_secs, 1)
}

/// Runs the comparison at every budget in `cfg.pmax_sweep_dbm`: policy
/// outputs are rescaled by `Pmax_new / Pmax_train` before clamping, while
/// baselines are rerun natively at each budget. The channel realizations are
/// identical across budgets and methods.
pub fn run_power_sweep(
    cfg: &ExperimentConfig,
    checkpoints: &[(String, Checkpoint)],
    baselines: &[BaselineKind],
) -> Result<Vec<SweepPoint>> {
    cfg.validate()?;
    check_unique_names(checkpoints, baselines)?;
    let mut points = Vec::with_capacity(cfg.pmax_sweep_dbm.len());
    for &pmax_dbm in &cfg.pmax_sweep_dbm {
        let net = NetworkConfig {
            pmax_dbm,
            ..cfg.network.clone()
        };
        let point_cfg = ExperimentConfig {
            network: net,
            ..cfg.clone()
        };
        let report = run_evaluation(&point_cfg, checkpoints, baselines)?;
        points.push(SweepPoint {
            pmax_dbm,
            methods: report.methods,
        });
    }
    Ok(points)
}

/// Writes `{prefix}_summary.csv` (two-decimal Mbps table),
/// `{prefix}_records.csv` (full-precision per-realization rates), and the
/// `{prefix}_timing.csv` sidecar (wall-clock, excluded from determinism
/// guarantees). Returns the file names written.
pub fn write_evaluation_files(
    report: &EvalReport,
    dir: &Path,
    prefix: &str,
) -> Result<Vec<String>> {
    std::fs::create_dir_all(dir)?;
    let summary_name = format!("{prefix}_summary.csv");
    let records_name = format!("{prefix}_records.csv");
    let timing_name = format!("{prefix}_timing.csv");

    let summary_rows: Vec<Vec<String>> = report
        .methods
        .iter()
        .map(|m| {
            vec![
                m.method.clone(),
                m.summary.n_realizations.to_string(),
                fmt_mbps(m.summary.mean_bps),
                fmt_mbps(m.summary.std_bps),
                fmt_mbps(m.summary.p05_bps),
                fmt_mbps(m.summary.p50_bps),
                fmt_mbps(m.summary.p95_bps),
            ]
        })
        .collect();
    write_csv(
        &dir.join(&summary_name),
        &[
            "method",
            "n_realizations",
            "mean_mbps",
            "std_mbps",
            "p05_mbps",
            "p50_mbps",
            "p95_mbps",
        ],
        &summary_rows,
    )?;

    let mut record_rows = Vec::new();
    for m in &report.methods {
        for (i, &rate) in m.summary.sum_rates_bps.iter().enumerate() {
            record_rows.push(vec![m.method.clone(), i.to_string(), fmt_f64(rate)]);
        }
    }
    write_csv(
        &dir.join(&records_name),
        &["method", "realization", "sum_rate_bps"],
        &record_rows,
    )?;

    let timing_rows: Vec<Vec<String>> = report
        .methods
        .iter()
        .map(|m| vec![m.method.clone(), fmt_f64(m.summary.mean_decision_ms)])
        .collect();
    write_csv(
        &dir.join(&timing_name),
        &["method", "mean_decision_ms"],
        &timing_rows,
    )?;

    Ok(vec![summary_name, records_name, timing_name])
}

/// Writes `sweep_summary.csv` (two-decimal Mbps) plus `sweep_raw.csv`
/// (full-precision). Returns the file names written.
pub fn write_sweep_files(points: &[SweepPoint], dir: &Path) -> Result<Vec<String>> {
    std::fs::create_dir_all(dir)?;
    let mut summary_rows = Vec::new();
    let mut raw_rows = Vec::new();
    for point in points {
        for m in &point.methods {
            summary_rows.push(vec![
                fmt_f64(point.pmax_dbm),
                m.method.clone(),
                fmt_mbps(m.summary.mean_bps),
                fmt_mbps(m.summary.std_bps),
            ]);
            raw_rows.push(vec![
                fmt_f64(point.pmax_dbm),
                m.method.clone(),
                fmt_f64(m.summary.mean_bps),
                fmt_f64(m.summary.std_bps),
                fmt_f64(m.summary.p05_bps),
                fmt_f64(m.summary.p50_bps),
                fmt_f64(m.summary.p95_bps),
            ]);
        }
    }
    write_csv(
        &dir.join("sweep_summary.csv"),
        &["pmax_dbm", "method", "mean_mbps", "std_mbps"],
        &summary_rows,
    )?;
    write_csv(
        &dir.join("sweep_raw.csv"),
        &[
            "pmax_dbm", "method", "mean_bps", "std_bps", "p05_bps", "p50_bps", "p95_bps",
        ],
        &raw_rows,
    )?;
    Ok(vec![
        "sweep_summary.csv".to_owned(),
        "sweep_raw.csv".to_owned(),
    ])
}

/// Human-readable comparison table (Mbps, two decimals).
pub fn format_evaluation_table(report: &EvalReport) -> String {
    let mut s = format!(
        "{:<24} {:>6} {:>10} {:>10} {:>10} {:>10} {:>10}\n",
        "method", "n", "mean", "std", "p05", "p50", "p95"
    );
    s.push_str(&format!("{:<24} {:>6} {:>54}\n", "", "", "[Mbps]"));
    for m in &report.methods {
        s.push_str(&format!(
            "{:<24} {:>6} {:>10} {:>10} {:>10} {:>10} {:>10}\n",
            m.method,
            m.summary.n_realizations,
            fmt_mbps(m.summary.mean_bps),
            fmt_mbps(m.summary.std_bps),
            fmt_mbps(m.summary.p05_bps),
            fmt_mbps(m.summary.p50_bps),
            fmt_mbps(m.summary.p95_bps),
        ));
    }
    s
}

/// Human-readable sweep table: one row per (budget, method).
pub fn format_sweep_table(points: &[SweepPoint]) -> String {
    let mut s = format!(
        "{:>9} {:<24} {:>12} {:>12}\n",
        "pmax_dbm", "method", "mean_mbps", "std_mbps"
    );
    for point in points {
        for m in &point.methods {
            s.push_str(&format!(
                "{:>9} {:<24} {:>12} {:>12}\n",
                fmt_f64(point.pmax_dbm),
                m.method,
                fmt_mbps(m.summary.mean_bps),
                fmt_mbps(m.summary.std_bps),
            ));
        }
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::agents::{compute_normalization, Agent, SchemeTag};
    use crate::netmodel::ConstraintMode;
    use crate::trpo::TrpoConfig;
    use tempfile::tempdir;

    fn desk_cfg() -> ExperimentConfig {
        ExperimentConfig {
            eval_realizations: 100,
            ..ExperimentConfig::default()
        }
    }

    /// A checkpoint whose policy always requests `2·Pmax` on every link —
    /// after clamping it reproduces the max-power allocation exactly.
    fn saturated_checkpoint(scheme: SchemeTag, net: &NetworkConfig) -> Checkpoint {
        let tcfg = TrpoConfig {
            hidden_layers: 2,
            hidden_units: 8,
            ..TrpoConfig::default()
        };
        let agent = Agent::new(scheme, net, &tcfg).unwrap();
        let theta = crate::neuralnet::ParamVector::zeros(agent.policy.shape().clone());
        let mut layers = theta.to_layers();
        let last = layers.last_mut().unwrap();
        let action_dim = agent.policy.action_dim();
        for a in 0..action_dim {
            last.biases[a] = 2.0 * net.pmax_watts();
        }
        let theta =
            crate::neuralnet::ParamVector::from_layers(agent.policy.shape().clone(), &layers)
                .unwrap();
        let norm = compute_normalization(
            scheme,
            net,
            64,
            &mut crate::seeding::stream(11, Stream::Normalization, 0, 0),
        )
        .unwrap();
        let phi = agent
            .value
            .init_params(&mut crate::seeding::stream(11, Stream::ValueInit, 0, 0));
        Checkpoint {
            scheme,
            constraint_mode: ConstraintMode::PerUser,
            pmax_dbm: net.pmax_dbm,
            policy_layers: agent.policy.shape().sizes().to_vec(),
            value_layers: agent.value.shape().sizes().to_vec(),
            norm,
            theta: theta.values().to_vec(),
            phi: phi.values().to_vec(),
        }
    }

    #[test]
    fn solvers_beat_random_on_the_shared_realizations() {
        let cfg = desk_cfg();
        let report = run_evaluation(&cfg, &[], &BaselineKind::ALL).unwrap();
        assert_eq!(report.methods.len(), 4);
        let random = report.method("random").unwrap().summary.mean_bps;
        let wmmse = report.method("wmmse").unwrap().summary.mean_bps;
        let fp = report.method("fp").unwrap().summary.mean_bps;
        assert!(report.method("max_power").is_some());
        assert!(random < wmmse, "random {random} should trail wmmse {wmmse}");
        assert!(random < fp, "random {random} should trail fp {fp}");
    }

    #[test]
    fn single_realization_table_is_a_replayed_rollout() {
        let mut cfg = desk_cfg();
        cfg.eval_realizations = 1;
        let report = run_evaluation(&cfg, &[], &[BaselineKind::MaxPower]).unwrap();
        let got = report.method("max_power").unwrap().summary.mean_bps;

        let mut rng_ch = stream(cfg.master_seed, Stream::EvalChannel, 0, 0);
        let geom = sample_geometry(&cfg.network, &mut rng_ch).unwrap();
        let h = sample_channels(&geom, &cfg.network, &mut rng_ch);
        let want = sum_rate(
            &h,
            &max_power(&cfg.network),
            noise_power(&cfg.network),
            cfg.network.bandwidth_hz,
        );
        assert_eq!(got, want);
    }

    #[test]
    fn repeated_evaluations_are_identical() {
        let mut cfg = desk_cfg();
        cfg.eval_realizations = 40;
        let a = run_evaluation(&cfg, &[], &[BaselineKind::MaxPower, BaselineKind::Random]).unwrap();
        let b = run_evaluation(&cfg, &[], &[BaselineKind::MaxPower, BaselineKind::Random]).unwrap();
        for (ma, mb) in a.methods.iter().zip(&b.methods) {
            assert_eq!(ma.method, mb.method);
            assert_eq!(ma.summary.sum_rates_bps, mb.summary.sum_rates_bps);
        }
    }

    #[test]
    fn saturated_policy_matches_the_max_power_baseline_bitwise() {
        let mut cfg = desk_cfg();
        cfg.eval_realizations = 60;
        let ck = saturated_checkpoint(SchemeTag::Centralized, &cfg.network);
        let report = run_evaluation(
            &cfg,
            &[("saturated".to_owned(), ck)],
            &[BaselineKind::MaxPower],
        )
        .unwrap();
        let policy = &report.method("saturated").unwrap().summary;
        let max = &report.method("max_power").unwrap().summary;
        assert_eq!(policy.sum_rates_bps, max.sum_rates_bps);
    }

    #[test]
    fn sweep_at_the_training_budget_matches_plain_evaluation() {
        let mut cfg = desk_cfg();
        cfg.eval_realizations = 30;
        cfg.pmax_sweep_dbm = vec![43.0];
        let ck = saturated_checkpoint(SchemeTag::FullyDecentralized, &cfg.network);
        let checkpoints = vec![("policy".to_owned(), ck)];
        let baselines = [BaselineKind::MaxPower, BaselineKind::Wmmse];
        let points = run_power_sweep(&cfg, &checkpoints, &baselines).unwrap();
        let report = run_evaluation(&cfg, &checkpoints, &baselines).unwrap();
        assert_eq!(points.len(), 1);
        assert_eq!(points[0].pmax_dbm, 43.0);
        for (sw, ev) in points[0].methods.iter().zip(&report.methods) {
            assert_eq!(sw.method, ev.method);
            assert_eq!(sw.summary.sum_rates_bps, ev.summary.sum_rates_bps);
        }
    }

    #[test]
    fn sweep_rescales_the_policy_onto_the_new_budget() {
        // At 20 dBm the saturated policy's raw request of 2·Pmax_train
        // rescales to 2·Pmax_new and still clamps to the new ceiling, so it
        // must again coincide with max power rerun natively at 20 dBm.
        let mut cfg = desk_cfg();
        cfg.eval_realizations = 25;
        cfg.pmax_sweep_dbm = vec![20.0];
        let ck = saturated_checkpoint(SchemeTag::Centralized, &cfg.network);
        let points = run_power_sweep(
            &cfg,
            &[("policy".to_owned(), ck)],
            &[BaselineKind::MaxPower],
        )
        .unwrap();
        let policy = &points[0].methods[0].summary;
        let max = &points[0].methods[1].summary;
        assert_eq!(policy.sum_rates_bps, max.sum_rates_bps);
        // And the low-budget rates differ from the training-budget ones.
        let at_train = run_evaluation(
            &ExperimentConfig {
                pmax_sweep_dbm: vec![],
                ..cfg.clone()
            },
            &[],
            &[BaselineKind::MaxPower],
        )
        .unwrap();
        assert_ne!(
            at_train.method("max_power").unwrap().summary.sum_rates_bps[0],
            max.sum_rates_bps[0]
        );
    }

    #[test]
    fn evaluation_files_round_trip_and_split_precision() {
        let mut cfg = desk_cfg();
        cfg.eval_realizations = 10;
        let report =
            run_evaluation(&cfg, &[], &[BaselineKind::MaxPower, BaselineKind::Random]).unwrap();
        let dir = tempdir().unwrap();
        let files = write_evaluation_files(&report, dir.path(), "evaluation").unwrap();
        assert_eq!(
            files,
            vec![
                "evaluation_summary.csv",
                "evaluation_records.csv",
                "evaluation_timing.csv"
            ]
        );
        let (header, rows) =
            super::super::csvio::read_csv(&dir.path().join("evaluation_records.csv")).unwrap();
        assert_eq!(header[2], "sum_rate_bps");
        assert_eq!(rows.len(), 2 * 10);
        // Full-precision records parse back bit-exactly.
        let first: f64 = rows[0][2].parse().unwrap();
        assert_eq!(
            first.to_bits(),
            report.methods[0].summary.sum_rates_bps[0].to_bits()
        );
        // The summary table is the two-decimal Mbps rendering.
        let (_, srows) =
            super::super::csvio::read_csv(&dir.path().join("evaluation_summary.csv")).unwrap();
        assert_eq!(srows[0][2], fmt_mbps(report.methods[0].summary.mean_bps));
    }

    #[test]
    fn duplicate_method_names_are_rejected() {
        let cfg = desk_cfg();
        let ck = saturated_checkpoint(SchemeTag::Centralized, &cfg.network);
        let err = run_evaluation(
            &cfg,
            &[("max_power".to_owned(), ck)],
            &[BaselineKind::MaxPower],
        )
        .unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }
}
