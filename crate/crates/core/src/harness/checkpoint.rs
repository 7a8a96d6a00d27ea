//! Versioned textual checkpoints for trained policy/critic pairs.
//!
//! A checkpoint stores everything needed to stand the policy back up in a
//! fresh process: the scheme tag, the feasibility mode and transmit budget
//! it was trained under, both networks' layer sizes, the input-normalization
//! constants, and the flat parameter vectors. Floats are written in Rust's
//! shortest-round-trip decimal form, so a save/load cycle is bit-exact.
//!
//! Format (line-oriented, fixed order):
//!
//! ```text
//! cellpower-checkpoint v1
//! scheme centralized
//! constraint_mode per_user
//! pmax_dbm 43
//! policy_layers 18 64 64 12
//! value_layers 30 64 64 1
//! norm_shift <csi_len floats>
//! norm_scale <csi_len floats>
//! theta <policy parameter floats>
//! phi <critic parameter floats>
//! ```

use std::fmt::Write as _;
use std::path::Path;

use crate::agents::{Agent, NormalizationConstants, SchemeTag, TrainOutput};
use crate::error::{Error, Result};
use crate::netmodel::{dbm_to_watts, ConstraintMode, NetworkConfig};
use crate::neuralnet::{ParamVector, PolicyNetwork, ValueNetwork};

const MAGIC: &str = "cellpower-checkpoint v1";

/// Serialized form of one trained policy/critic pair.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    /// Power-control scheme the policy was trained for.
    pub scheme: SchemeTag,
    /// Feasibility interpretation used during training.
    pub constraint_mode: ConstraintMode,
    /// Transmit budget the policy was trained at, in dBm. Deployment at a
    /// different budget rescales raw policy outputs by the watt ratio.
    pub pmax_dbm: f64,
    /// Policy MLP layer sizes, input first, `2·action_dim` last.
    pub policy_layers: Vec<usize>,
    /// Critic MLP layer sizes, input first, 1 last.
    pub value_layers: Vec<usize>,
    /// Input-normalization constants for the CSI block of the state.
    pub norm: NormalizationConstants,
    /// Flat policy parameters.
    pub theta: Vec<f64>,
    /// Flat critic parameters.
    pub phi: Vec<f64>,
}

/// A checkpoint instantiated against a concrete scenario: ready-to-run
/// networks plus their parameters and normalization constants.
#[derive(Debug, Clone)]
pub struct LoadedPolicy {
    pub agent: Agent,
    pub theta: ParamVector,
    pub phi: ParamVector,
    pub norm: NormalizationConstants,
}

impl Checkpoint {
    /// Captures a finished (or aborted-with-partial-progress) training run.
    pub fn from_training(
        scheme: SchemeTag,
        pmax_dbm: f64,
        constraint_mode: ConstraintMode,
        out: &TrainOutput,
    ) -> Checkpoint {
        Checkpoint {
            scheme,
            constraint_mode,
            pmax_dbm,
            policy_layers: out.theta.shape().sizes().to_vec(),
            value_layers: out.phi.shape().sizes().to_vec(),
            norm: out.norm.clone(),
            theta: out.theta.values().to_vec(),
            phi: out.phi.values().to_vec(),
        }
    }

    /// Raw-output multiplier for deploying this policy at `net`'s budget:
    /// `Pmax_deploy / Pmax_train` in watts. Exactly 1 when the budgets match.
    pub fn rescale_factor(&self, net: &NetworkConfig) -> f64 {
        net.pmax_watts() / dbm_to_watts(self.pmax_dbm)
    }

    /// Writes the checkpoint to `path`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = String::new();
        text.push_str(MAGIC);
        text.push('\n');
        writeln!(text, "scheme {}", self.scheme.as_str()).expect("string write");
        writeln!(text, "constraint_mode {}", self.constraint_mode.as_str()).expect("string write");
        writeln!(text, "pmax_dbm {}", self.pmax_dbm).expect("string write");
        push_usize_line(&mut text, "policy_layers", &self.policy_layers);
        push_usize_line(&mut text, "value_layers", &self.value_layers);
        push_f64_line(&mut text, "norm_shift", &self.norm.csi_shift);
        push_f64_line(&mut text, "norm_scale", &self.norm.csi_scale);
        push_f64_line(&mut text, "theta", &self.theta);
        push_f64_line(&mut text, "phi", &self.phi);
        std::fs::write(path, text)?;
        Ok(())
    }

    /// Reads a checkpoint written by [`Checkpoint::save`].
    pub fn load(path: &Path) -> Result<Checkpoint> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            Error::Config(format!("cannot read checkpoint {}: {e}", path.display()))
        })?;
        let mut lines = text.lines();
        match lines.next() {
            Some(first) if first == MAGIC => {}
            other => {
                return Err(Error::Parse(format!(
                    "{}: expected header `{MAGIC}`, got `{}`",
                    path.display(),
                    other.unwrap_or("<empty>")
                )))
            }
        }
        let scheme = SchemeTag::parse(field(&mut lines, "scheme")?)?;
        let constraint_mode = ConstraintMode::parse(field(&mut lines, "constraint_mode")?)?;
        let pmax_dbm = parse_f64_field("pmax_dbm", field(&mut lines, "pmax_dbm")?)?;
        let policy_layers = parse_usize_list(field(&mut lines, "policy_layers")?)?;
        let value_layers = parse_usize_list(field(&mut lines, "value_layers")?)?;
        let csi_shift = parse_f64_list(field(&mut lines, "norm_shift")?)?;
        let csi_scale = parse_f64_list(field(&mut lines, "norm_scale")?)?;
        let theta = parse_f64_list(field(&mut lines, "theta")?)?;
        let phi = parse_f64_list(field(&mut lines, "phi")?)?;
        if lines.any(|l| !l.trim().is_empty()) {
            return Err(Error::Parse(format!(
                "{}: trailing content after phi",
                path.display()
            )));
        }
        let ck = Checkpoint {
            scheme,
            constraint_mode,
            pmax_dbm,
            policy_layers,
            value_layers,
            norm: NormalizationConstants {
                csi_shift,
                csi_scale,
            },
            theta,
            phi,
        };
        ck.check_wellformed()
            .map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
        Ok(ck)
    }

    /// Structural sanity independent of any scenario: finite numbers, valid
    /// normalization, at least input and output layers.
    fn check_wellformed(&self) -> Result<()> {
        if !self.pmax_dbm.is_finite() {
            return Err(Error::Parse("non-finite pmax_dbm".into()));
        }
        if self.policy_layers.len() < 2 || self.value_layers.len() < 2 {
            return Err(Error::Parse(
                "layer lists need at least input and output sizes".into(),
            ));
        }
        self.norm.validate()?;
        if !self.theta.iter().all(|x| x.is_finite()) || !self.phi.iter().all(|x| x.is_finite()) {
            return Err(Error::Parse("non-finite parameter values".into()));
        }
        Ok(())
    }

    /// Rebuilds the policy/critic pair against `net`, verifying that every
    /// dimension matches the scenario this checkpoint claims to control.
    pub fn instantiate(&self, net: &NetworkConfig) -> Result<LoadedPolicy> {
        net.validate()?;
        self.check_wellformed()
            .map_err(|e| Error::Config(e.to_string()))?;
        let b = net.num_cells;
        let k = net.users_per_cell;
        let state_dim = self.scheme.state_dim(b, k);
        let action_dim = self.scheme.action_dim(b, k);
        let value_input_dim = state_dim + 2 * action_dim;
        if self.policy_layers[0] != state_dim
            || *self.policy_layers.last().expect("nonempty") != 2 * action_dim
        {
            return Err(Error::Config(format!(
                "checkpoint policy is {:?} but a {} policy for B={b}, K={k} needs {} inputs and {} outputs",
                self.policy_layers,
                self.scheme.as_str(),
                state_dim,
                2 * action_dim
            )));
        }
        if self.value_layers[0] != value_input_dim
            || *self.value_layers.last().expect("nonempty") != 1
        {
            return Err(Error::Config(format!(
                "checkpoint critic is {:?} but a {} critic for B={b}, K={k} needs {} inputs and 1 output",
                self.value_layers,
                self.scheme.as_str(),
                value_input_dim
            )));
        }
        if self.norm.csi_len() != self.scheme.csi_len(b, k) {
            return Err(Error::Config(format!(
                "checkpoint normalizes {} CSI features but the {} scheme on B={b}, K={k} has {}",
                self.norm.csi_len(),
                self.scheme.as_str(),
                self.scheme.csi_len(b, k)
            )));
        }
        let policy_hidden = &self.policy_layers[1..self.policy_layers.len() - 1];
        let value_hidden = &self.value_layers[1..self.value_layers.len() - 1];
        let policy = PolicyNetwork::new(
            state_dim,
            action_dim,
            policy_hidden,
            dbm_to_watts(self.pmax_dbm),
        )?;
        let value = ValueNetwork::new(value_input_dim, value_hidden)?;
        if self.theta.len() != policy.shape().param_count() {
            return Err(Error::Config(format!(
                "checkpoint carries {} policy parameters, layer sizes {:?} need {}",
                self.theta.len(),
                self.policy_layers,
                policy.shape().param_count()
            )));
        }
        if self.phi.len() != value.shape().param_count() {
            return Err(Error::Config(format!(
                "checkpoint carries {} critic parameters, layer sizes {:?} need {}",
                self.phi.len(),
                self.value_layers,
                value.shape().param_count()
            )));
        }
        let theta = ParamVector::from_values(policy.shape().clone(), self.theta.clone())?;
        let phi = ParamVector::from_values(value.shape().clone(), self.phi.clone())?;
        Ok(LoadedPolicy {
            agent: Agent {
                scheme: self.scheme,
                policy,
                value,
            },
            theta,
            phi,
            norm: self.norm.clone(),
        })
    }
}

fn push_usize_line(text: &mut String, key: &str, values: &[usize]) {
    text.push_str(key);
    for v in values {
        write!(text, " {v}").expect("string write");
    }
    text.push('\n');
}

fn push_f64_line(text: &mut String, key: &str, values: &[f64]) {
    text.push_str(key);
    for v in values {
        write!(text, " {v}").expect("string write");
    }
    text.push('\n');
}

fn field<'a>(lines: &mut std::str::Lines<'a>, key: &str) -> Result<&'a str> {
    let line = lines
        .next()
        .ok_or_else(|| Error::Parse(format!("missing `{key}` line")))?;
    line.strip_prefix(key)
        .map(str::trim)
        .ok_or_else(|| Error::Parse(format!("expected `{key} …`, got `{line}`")))
}

fn parse_f64_field(key: &str, value: &str) -> Result<f64> {
    value
        .parse::<f64>()
        .map_err(|_| Error::Parse(format!("{key}: expected a number, got `{value}`")))
}

fn parse_usize_list(value: &str) -> Result<Vec<usize>> {
    value
        .split_whitespace()
        .map(|v| {
            v.parse::<usize>()
                .map_err(|_| Error::Parse(format!("expected an unsigned integer, got `{v}`")))
        })
        .collect()
}

fn parse_f64_list(value: &str) -> Result<Vec<f64>> {
    value
        .split_whitespace()
        .map(|v| {
            v.parse::<f64>()
                .map_err(|_| Error::Parse(format!("expected a number, got `{v}`")))
        })
        .collect()
}
