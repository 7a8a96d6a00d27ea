//! Flat key=value configuration documents.
//!
//! One line per field, `key = value`, with `#` comments and blank lines
//! ignored. Keys mirror [`ExperimentConfig`] field names, using dotted paths
//! for the nested network and optimizer structs (`network.num_cells`,
//! `trpo.kl_delta`, …). Any key may be omitted — the desk-scale default
//! fills the gap — but unknown and repeated keys are errors, so a typo can
//! never silently fall back to a default.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use crate::agents::SchemeTag;
use crate::error::{Error, Result};
use crate::netmodel::{ConstraintMode, Layout};
use crate::trpo::UpdateRule;

use super::csvio::fmt_f64;
use super::ExperimentConfig;

impl ExperimentConfig {
    /// Parses a flat key=value document, starting from the default profile.
    pub fn from_flat_str(text: &str) -> Result<Self> {
        let mut cfg = ExperimentConfig::default();
        let mut seen: HashSet<String> = HashSet::new();
        for (lineno, raw_line) in text.lines().enumerate() {
            let line = raw_line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Parse(format!(
                    "line {}: expected `key = value`, got `{line}`",
                    lineno + 1
                ))
            })?;
            let key = key.trim();
            let value = value.trim();
            if !seen.insert(key.to_owned()) {
                return Err(Error::Parse(format!(
                    "line {}: repeated key `{key}`",
                    lineno + 1
                )));
            }
            apply_key(&mut cfg, key, value)
                .map_err(|e| Error::Parse(format!("line {}: {e}", lineno + 1)))?;
        }
        Ok(cfg)
    }

    /// Loads a flat key=value document from disk.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_flat_str(&text)
    }

    /// Renders the full configuration as a flat document that parses back to
    /// an identical value.
    pub fn to_flat_string(&self) -> String {
        let mut s = String::new();
        let mut put = |key: &str, value: String| {
            s.push_str(key);
            s.push_str(" = ");
            s.push_str(&value);
            s.push('\n');
        };
        put("network.num_cells", self.network.num_cells.to_string());
        put(
            "network.users_per_cell",
            self.network.users_per_cell.to_string(),
        );
        put("network.bandwidth_hz", fmt_f64(self.network.bandwidth_hz));
        put("network.pmax_dbm", fmt_f64(self.network.pmax_dbm));
        put(
            "network.noise_psd_dbm_hz",
            fmt_f64(self.network.noise_psd_dbm_hz),
        );
        put(
            "network.noise_figure_db",
            fmt_f64(self.network.noise_figure_db),
        );
        put(
            "network.ref_distance_m",
            fmt_f64(self.network.ref_distance_m),
        );
        put("network.cell_radius_m", fmt_f64(self.network.cell_radius_m));
        put("network.pathloss_exp", fmt_f64(self.network.pathloss_exp));
        put("network.layout", self.network.layout.as_str().to_owned());
        put("trpo.kl_delta", fmt_f64(self.trpo.kl_delta));
        put("trpo.step_zeta", fmt_f64(self.trpo.step_zeta));
        put("trpo.discount_gamma", fmt_f64(self.trpo.discount_gamma));
        put(
            "trpo.episodes_per_iter",
            self.trpo.episodes_per_iter.to_string(),
        );
        put("trpo.cg_iters", self.trpo.cg_iters.to_string());
        put("trpo.cg_tol", fmt_f64(self.trpo.cg_tol));
        put("trpo.fisher_damping", fmt_f64(self.trpo.fisher_damping));
        put("trpo.max_backtracks", self.trpo.max_backtracks.to_string());
        put("trpo.critic_lr", fmt_f64(self.trpo.critic_lr));
        put("trpo.critic_epochs", self.trpo.critic_epochs.to_string());
        put(
            "trpo.critic_minibatch",
            self.trpo.critic_minibatch.to_string(),
        );
        put("trpo.hidden_layers", self.trpo.hidden_layers.to_string());
        put("trpo.hidden_units", self.trpo.hidden_units.to_string());
        put("trpo.updater", self.trpo.updater.as_str().to_owned());
        put("trpo.fixed_step_size", fmt_f64(self.trpo.fixed_step_size));
        put("scheme", self.scheme.as_str().to_owned());
        put("iterations", self.iterations.to_string());
        put("n_seeds", self.n_seeds.to_string());
        put("eval_realizations", self.eval_realizations.to_string());
        let sweep: Vec<String> = self.pmax_sweep_dbm.iter().map(|&p| fmt_f64(p)).collect();
        put("pmax_sweep_dbm", sweep.join(", "));
        put("constraint_mode", self.constraint_mode.as_str().to_owned());
        put("output_dir", self.output_dir.display().to_string());
        put("master_seed", self.master_seed.to_string());
        s
    }
}

fn apply_key(cfg: &mut ExperimentConfig, key: &str, value: &str) -> Result<()> {
    match key {
        "network.num_cells" => cfg.network.num_cells = parse_usize(key, value)?,
        "network.users_per_cell" => cfg.network.users_per_cell = parse_usize(key, value)?,
        "network.bandwidth_hz" => cfg.network.bandwidth_hz = parse_f64(key, value)?,
        "network.pmax_dbm" => cfg.network.pmax_dbm = parse_f64(key, value)?,
        "network.noise_psd_dbm_hz" => cfg.network.noise_psd_dbm_hz = parse_f64(key, value)?,
        "network.noise_figure_db" => cfg.network.noise_figure_db = parse_f64(key, value)?,
        "network.ref_distance_m" => cfg.network.ref_distance_m = parse_f64(key, value)?,
        "network.cell_radius_m" => cfg.network.cell_radius_m = parse_f64(key, value)?,
        "network.pathloss_exp" => cfg.network.pathloss_exp = parse_f64(key, value)?,
        "network.layout" => cfg.network.layout = Layout::parse(value)?,
        "trpo.kl_delta" => cfg.trpo.kl_delta = parse_f64(key, value)?,
        "trpo.step_zeta" => cfg.trpo.step_zeta = parse_f64(key, value)?,
        "trpo.discount_gamma" => cfg.trpo.discount_gamma = parse_f64(key, value)?,
        "trpo.episodes_per_iter" => cfg.trpo.episodes_per_iter = parse_usize(key, value)?,
        "trpo.cg_iters" => cfg.trpo.cg_iters = parse_usize(key, value)?,
        "trpo.cg_tol" => cfg.trpo.cg_tol = parse_f64(key, value)?,
        "trpo.fisher_damping" => cfg.trpo.fisher_damping = parse_f64(key, value)?,
        "trpo.max_backtracks" => cfg.trpo.max_backtracks = parse_usize(key, value)?,
        "trpo.critic_lr" => cfg.trpo.critic_lr = parse_f64(key, value)?,
        "trpo.critic_epochs" => cfg.trpo.critic_epochs = parse_usize(key, value)?,
        "trpo.critic_minibatch" => cfg.trpo.critic_minibatch = parse_usize(key, value)?,
        "trpo.hidden_layers" => cfg.trpo.hidden_layers = parse_usize(key, value)?,
        "trpo.hidden_units" => cfg.trpo.hidden_units = parse_usize(key, value)?,
        "trpo.updater" => cfg.trpo.updater = UpdateRule::parse(value)?,
        "trpo.fixed_step_size" => cfg.trpo.fixed_step_size = parse_f64(key, value)?,
        "scheme" => cfg.scheme = SchemeTag::parse(value)?,
        "iterations" => cfg.iterations = parse_usize(key, value)?,
        "n_seeds" => cfg.n_seeds = parse_usize(key, value)?,
        "eval_realizations" => cfg.eval_realizations = parse_usize(key, value)?,
        "pmax_sweep_dbm" => {
            cfg.pmax_sweep_dbm = value
                .split(',')
                .map(str::trim)
                .filter(|v| !v.is_empty())
                .map(|v| parse_f64(key, v))
                .collect::<Result<Vec<f64>>>()?;
        }
        "constraint_mode" => cfg.constraint_mode = ConstraintMode::parse(value)?,
        "output_dir" => cfg.output_dir = PathBuf::from(value),
        "master_seed" => {
            cfg.master_seed = value.parse::<u64>().map_err(|_| {
                Error::Parse(format!(
                    "{key}: expected an unsigned integer, got `{value}`"
                ))
            })?;
        }
        other => return Err(Error::Parse(format!("unknown config key `{other}`"))),
    }
    Ok(())
}

fn parse_usize(key: &str, value: &str) -> Result<usize> {
    value.parse::<usize>().map_err(|_| {
        Error::Parse(format!(
            "{key}: expected an unsigned integer, got `{value}`"
        ))
    })
}

fn parse_f64(key: &str, value: &str) -> Result<f64> {
    value
        .parse::<f64>()
        .map_err(|_| Error::Parse(format!("{key}: expected a number, got `{value}`")))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_profile_round_trips_through_flat_text() {
        let cfg = ExperimentConfig::default();
        let text = cfg.to_flat_string();
        let back = ExperimentConfig::from_flat_str(&text).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn every_field_is_settable_from_a_document() {
        let text = "\
# full override
network.num_cells = 7
network.users_per_cell = 8
network.bandwidth_hz = 1e7
network.pmax_dbm = 38
network.noise_psd_dbm_hz = -160
network.noise_figure_db = 7
network.ref_distance_m = 0.5
network.cell_radius_m = 400
network.pathloss_exp = 4
network.layout = hex7_wraparound
trpo.kl_delta = 0.02
trpo.step_zeta = 0.8
trpo.discount_gamma = 0.95
trpo.episodes_per_iter = 10
trpo.cg_iters = 12
trpo.cg_tol = 1e-9
trpo.fisher_damping = 0.1
trpo.max_backtracks = 3
trpo.critic_lr = 0.01
trpo.critic_epochs = 2
trpo.critic_minibatch = 16
trpo.hidden_layers = 1
trpo.hidden_units = 32
trpo.updater = a2c
trpo.fixed_step_size = 0.001
scheme = partial
iterations = 12
n_seeds = 4
eval_realizations = 64
pmax_sweep_dbm = 20, 43
constraint_mode = sum_power
output_dir = results/run1
master_seed = 99
";
        let cfg = ExperimentConfig::from_flat_str(text).unwrap();
        assert_eq!(cfg.network.num_cells, 7);
        assert_eq!(cfg.network.users_per_cell, 8);
        assert_eq!(cfg.network.layout, Layout::Hex7Wraparound);
        assert_eq!(cfg.network.pmax_dbm, 38.0);
        assert_eq!(cfg.trpo.updater, UpdateRule::FixedStep);
        assert_eq!(cfg.trpo.hidden_units, 32);
        assert_eq!(cfg.scheme, SchemeTag::PartiallyDecentralized);
        assert_eq!(cfg.iterations, 12);
        assert_eq!(cfg.n_seeds, 4);
        assert_eq!(cfg.eval_realizations, 64);
        assert_eq!(cfg.pmax_sweep_dbm, vec![20.0, 43.0]);
        assert_eq!(cfg.constraint_mode, ConstraintMode::SumPower);
        assert_eq!(cfg.output_dir, PathBuf::from("results/run1"));
        assert_eq!(cfg.master_seed, 99);
        // Untouched keys keep their defaults.
        assert_eq!(cfg.trpo.max_backtracks, 3);
        let roundtrip = ExperimentConfig::from_flat_str(&cfg.to_flat_string()).unwrap();
        assert_eq!(roundtrip, cfg);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = ExperimentConfig::from_flat_str("networc.num_cells = 3\n").unwrap_err();
        assert!(matches!(err, Error::Parse(_)));
        assert!(err.to_string().contains("networc.num_cells"));
    }

    #[test]
    fn repeated_keys_are_rejected() {
        let err = ExperimentConfig::from_flat_str("iterations = 5\niterations = 6\n").unwrap_err();
        assert!(matches!(err, Error::Parse(_)));
        assert!(err.to_string().contains("repeated"));
    }

    #[test]
    fn malformed_lines_and_values_are_rejected() {
        assert!(ExperimentConfig::from_flat_str("iterations 5\n").is_err());
        assert!(ExperimentConfig::from_flat_str("iterations = five\n").is_err());
        assert!(ExperimentConfig::from_flat_str("scheme = federated\n").is_err());
        assert!(ExperimentConfig::from_flat_str("network.layout = ring\n").is_err());
    }

    #[test]
    fn comments_and_blank_lines_are_ignored() {
        let cfg = ExperimentConfig::from_flat_str("\n# note\n  \niterations = 7\n").unwrap();
        assert_eq!(cfg.iterations, 7);
    }
}
