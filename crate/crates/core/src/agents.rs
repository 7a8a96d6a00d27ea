//! Power-control schemes: state encodings, rollouts, training, evaluation.
//!
//! Three schemes share one learning stack and differ only in what each
//! decision sees and how many decisions an episode holds:
//!
//! * **centralized** — one agent observes every network channel and emits the
//!   whole power matrix in a single step;
//! * **partially decentralized** — base stations act sequentially in a fresh
//!   random order each episode, each seeing its own channels plus the powers
//!   already chosen this slot;
//! * **fully decentralized** — every base station acts from its own channels
//!   alone, with no communication at all.
//!
//! All schemes are rewarded with the network sum-rate of the resulting
//! allocation; the decentralized schemes receive it only at the episode's
//! final step.

use std::time::Instant;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::netmodel::{
    noise_power, project_power_row, sample_channels, sample_geometry, sum_rate, ChannelTensor,
    ConstraintMode, NetworkConfig, PowerMatrix,
};
use crate::neuralnet::{sample_action, ParamVector, PolicyNetwork, ValueNetwork};
use crate::seeding::{stream, Stream};
use crate::trpo::{
    a2c_update, batch_returns, conjugate_gradient, estimate_advantages, fit_critic,
    line_search_update, natural_step, Episode, EpisodeBatch, ScoreTable, Transition, TrpoConfig,
    UpdateRule,
};

/// Floor applied to a channel power gain before the dB feature, keeping the
/// logarithm finite for an exactly-zero gain.
const MIN_POWER_GAIN: f64 = 1e-300;

/// Floor for per-feature normalization scales, so a degenerate (constant)
/// feature maps to zero instead of dividing by zero.
const CSI_SCALE_FLOOR: f64 = 1e-6;

/// Channel realizations presampled at training start to fix the input
/// normalization constants.
pub const NORMALIZATION_REALIZATIONS: usize = 10_000;

/// Weight of the newest sample in the exponentially smoothed reward curve:
/// `s[n] = w·x[n] + (1−w)·s[n−1]` with `s[0] = x[0]`.
pub const SMOOTH_WEIGHT: f64 = 0.96;

/// Which of the three power-control schemes a policy was trained for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SchemeTag {
    /// One decision per slot covering all cells, from full network CSI.
    Centralized,
    /// BSs act sequentially in random order; each sees its own CSI plus the
    /// powers already chosen this slot.
    PartiallyDecentralized,
    /// All BSs act simultaneously from their own CSI alone.
    FullyDecentralized,
}

impl SchemeTag {
    pub fn as_str(self) -> &'static str {
        match self {
            SchemeTag::Centralized => "centralized",
            SchemeTag::PartiallyDecentralized => "partial",
            SchemeTag::FullyDecentralized => "full",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "centralized" => Ok(SchemeTag::Centralized),
            "partial" => Ok(SchemeTag::PartiallyDecentralized),
            "full" => Ok(SchemeTag::FullyDecentralized),
            other => Err(Error::Parse(format!("unknown scheme `{other}`"))),
        }
    }

    pub const ALL: [SchemeTag; 3] = [
        SchemeTag::Centralized,
        SchemeTag::PartiallyDecentralized,
        SchemeTag::FullyDecentralized,
    ];

    /// Number of dB channel features visible to one decision: all `B²K`
    /// network channels for the centralized scheme, the acting BS's `B·K`
    /// outgoing channels otherwise.
    pub fn csi_len(self, num_cells: usize, users_per_cell: usize) -> usize {
        match self {
            SchemeTag::Centralized => num_cells * num_cells * users_per_cell,
            _ => num_cells * users_per_cell,
        }
    }

    /// Policy input width: the CSI block plus, for the sequential scheme,
    /// `(B−1)·K` prior-power slots.
    pub fn state_dim(self, num_cells: usize, users_per_cell: usize) -> usize {
        let csi = self.csi_len(num_cells, users_per_cell);
        match self {
            SchemeTag::PartiallyDecentralized => csi + (num_cells - 1) * users_per_cell,
            _ => csi,
        }
    }

    /// Policy output width in power levels: the whole network for the
    /// centralized scheme, one cell's users otherwise.
    pub fn action_dim(self, num_cells: usize, users_per_cell: usize) -> usize {
        match self {
            SchemeTag::Centralized => num_cells * users_per_cell,
            _ => users_per_cell,
        }
    }

    /// Episode length: one step for the centralized scheme, one per BS for
    /// the decentralized schemes.
    pub fn horizon(self, num_cells: usize) -> usize {
        match self {
            SchemeTag::Centralized => 1,
            _ => num_cells,
        }
    }
}

// ---------------------------------------------------------------------------
// Input normalization
// ---------------------------------------------------------------------------

/// Per-feature affine normalization for the dB channel features, computed
/// once from presampled channel realizations and frozen into the checkpoint
/// so training and deployment see identical inputs. Power features need no
/// stored constants: they are always fractions of the current budget.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalizationConstants {
    /// Per-feature shift, subtracted from the dB gain.
    pub csi_shift: Vec<f64>,
    /// Per-feature scale, divided out after the shift; every entry is at
    /// least [`CSI_SCALE_FLOOR`].
    pub csi_scale: Vec<f64>,
}

impl NormalizationConstants {
    /// Pass-through constants (shift 0, scale 1) for the given feature count.
    pub fn identity(csi_len: usize) -> Self {
        NormalizationConstants {
            csi_shift: vec![0.0; csi_len],
            csi_scale: vec![1.0; csi_len],
        }
    }

    pub fn csi_len(&self) -> usize {
        self.csi_shift.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.csi_shift.is_empty() || self.csi_shift.len() != self.csi_scale.len() {
            return Err(Error::Shape(format!(
                "normalization arrays must be equal-length and non-empty, got {} shifts and {} scales",
                self.csi_shift.len(),
                self.csi_scale.len()
            )));
        }
        if !self.csi_shift.iter().all(|v| v.is_finite()) {
            return Err(Error::Numerical("non-finite normalization shift".into()));
        }
        if !self.csi_scale.iter().all(|v| v.is_finite() && *v > 0.0) {
            return Err(Error::Numerical(
                "normalization scales must be positive and finite".into(),
            ));
        }
        Ok(())
    }
}

/// dB power-gain feature of one channel, floored so a zero gain stays finite.
fn csi_feature(h: &ChannelTensor, tx: usize, cell: usize, user: usize) -> f64 {
    10.0 * h.power_gain(tx, cell, user).max(MIN_POWER_GAIN).log10()
}

/// Writes the raw (unnormalized) dB features of one decision's view into
/// `out`: all channels in `(tx, cell, user)` order when `tx_only` is `None`,
/// otherwise the fixed transmitter's channels in `(cell, user)` order.
fn fill_csi_features(h: &ChannelTensor, tx_only: Option<usize>, out: &mut [f64]) {
    let (b, k) = (h.num_cells(), h.users_per_cell());
    let mut i = 0;
    let txs: std::ops::Range<usize> = match tx_only {
        Some(tx) => tx..tx + 1,
        None => 0..b,
    };
    for tx in txs {
        for cell in 0..b {
            for user in 0..k {
                out[i] = csi_feature(h, tx, cell, user);
                i += 1;
            }
        }
    }
    debug_assert_eq!(i, out.len());
}

/// Estimates per-feature mean and standard deviation of the dB channel
/// features over `n_realizations` fresh geometry+channel draws. For the
/// decentralized schemes every BS's view of every realization contributes to
/// the same per-slot statistics, since one shared policy serves all BSs.
pub fn compute_normalization(
    scheme: SchemeTag,
    cfg: &NetworkConfig,
    n_realizations: usize,
    rng: &mut impl Rng,
) -> Result<NormalizationConstants> {
    cfg.validate()?;
    if n_realizations == 0 {
        return Err(Error::Config(
            "need at least one realization to fix normalization".into(),
        ));
    }
    let (b, k) = (cfg.num_cells, cfg.users_per_cell);
    let len = scheme.csi_len(b, k);
    let mut sum = vec![0.0; len];
    let mut sumsq = vec![0.0; len];
    let mut buf = vec![0.0; len];
    let mut count = 0u64;
    for _ in 0..n_realizations {
        let geom = sample_geometry(cfg, rng)?;
        let h = sample_channels(&geom, cfg, rng);
        match scheme {
            SchemeTag::Centralized => {
                fill_csi_features(&h, None, &mut buf);
                accumulate_moments(&buf, &mut sum, &mut sumsq);
                count += 1;
            }
            _ => {
                for bs in 0..b {
                    fill_csi_features(&h, Some(bs), &mut buf);
                    accumulate_moments(&buf, &mut sum, &mut sumsq);
                    count += 1;
                }
            }
        }
    }
    let n = count as f64;
    let mut csi_shift = Vec::with_capacity(len);
    let mut csi_scale = Vec::with_capacity(len);
    for j in 0..len {
        let mean = sum[j] / n;
        let var = (sumsq[j] / n - mean * mean).max(0.0);
        csi_shift.push(mean);
        csi_scale.push(var.sqrt().max(CSI_SCALE_FLOOR));
    }
    let norm = NormalizationConstants {
        csi_shift,
        csi_scale,
    };
    norm.validate()?;
    Ok(norm)
}

fn accumulate_moments(features: &[f64], sum: &mut [f64], sumsq: &mut [f64]) {
    for (j, &f) in features.iter().enumerate() {
        sum[j] += f;
        sumsq[j] += f * f;
    }
}

// ---------------------------------------------------------------------------
// State encoders
// ---------------------------------------------------------------------------

/// Encodes the channel features one decision may see, already normalized.
///
/// The centralized scheme flattens all `B²K` channels in `(tx, cell, user)`
/// order and ignores `bs_index`; the decentralized schemes encode the `B·K`
/// channels leaving transmitter `bs_index`, in `(cell, user)` order.
pub fn encode_csi(
    h: &ChannelTensor,
    scheme: SchemeTag,
    bs_index: usize,
    norm: &NormalizationConstants,
) -> Result<Vec<f64>> {
    let (b, k) = (h.num_cells(), h.users_per_cell());
    let len = scheme.csi_len(b, k);
    if norm.csi_len() != len {
        return Err(Error::Shape(format!(
            "normalization covers {} features but the {} scheme encodes {len}",
            norm.csi_len(),
            scheme.as_str()
        )));
    }
    let tx_only = match scheme {
        SchemeTag::Centralized => None,
        _ => {
            if bs_index >= b {
                return Err(Error::Shape(format!(
                    "BS index {bs_index} out of range for {b} cells"
                )));
            }
            Some(bs_index)
        }
    };
    let mut out = vec![0.0; len];
    fill_csi_features(h, tx_only, &mut out);
    for (f, (s, c)) in out
        .iter_mut()
        .zip(norm.csi_shift.iter().zip(&norm.csi_scale))
    {
        *f = (*f - s) / c;
    }
    Ok(out)
}

/// State of the `i`-th sequential decision: the acting BS's own channel
/// features followed by `(B−1)·K` prior-power slots. `prior_powers` holds the
/// watt-level decisions already taken this episode, in acting order; they are
/// encoded as fractions of the budget, and the not-yet-filled slots stay zero
/// (the first actor sees an all-zero power block).
pub fn encode_partial_state(
    h: &ChannelTensor,
    bs_index: usize,
    prior_powers: &[f64],
    pmax_watts: f64,
    norm: &NormalizationConstants,
) -> Result<Vec<f64>> {
    let (b, k) = (h.num_cells(), h.users_per_cell());
    let slots = (b - 1) * k;
    if prior_powers.len() > slots {
        return Err(Error::Shape(format!(
            "{} prior powers exceed the {} slots of a {b}-cell state",
            prior_powers.len(),
            slots
        )));
    }
    if !(pmax_watts > 0.0) {
        return Err(Error::Config(format!(
            "power budget must be positive, got {pmax_watts}"
        )));
    }
    let mut state = encode_csi(h, SchemeTag::PartiallyDecentralized, bs_index, norm)?;
    state.reserve(slots);
    for &p in prior_powers {
        state.push(p / pmax_watts);
    }
    state.resize(b * k + slots, 0.0);
    Ok(state)
}

// ---------------------------------------------------------------------------
// Agent construction
// ---------------------------------------------------------------------------

/// Policy and critic network descriptors sized for one scheme and scenario.
/// The critic consumes the state, the applied power fractions, and the
/// head's log-σ values, hence input width `state_dim + 2·action_dim`.
#[derive(Debug, Clone)]
pub struct Agent {
    pub scheme: SchemeTag,
    pub policy: PolicyNetwork,
    pub value: ValueNetwork,
}

impl Agent {
    pub fn new(scheme: SchemeTag, cfg: &NetworkConfig, tcfg: &TrpoConfig) -> Result<Agent> {
        cfg.validate()?;
        tcfg.validate()?;
        let (b, k) = (cfg.num_cells, cfg.users_per_cell);
        let state_dim = scheme.state_dim(b, k);
        let action_dim = scheme.action_dim(b, k);
        let hidden = tcfg.hidden_sizes();
        let policy = PolicyNetwork::new(state_dim, action_dim, &hidden, cfg.pmax_watts())?;
        let value = ValueNetwork::new(state_dim + 2 * action_dim, &hidden)?;
        Ok(Agent {
            scheme,
            policy,
            value,
        })
    }
}

// ---------------------------------------------------------------------------
// Rollouts
// ---------------------------------------------------------------------------

/// Knobs that vary between training, evaluation, and budget-sweep rollouts.
#[derive(Debug, Clone)]
pub struct RolloutOptions {
    /// Force every log-σ to the policy's floor before sampling, making the
    /// rollout near-deterministic while keeping the sampling code path.
    pub sigma_floor: bool,
    /// Multiplier applied to raw actions before clamping, used to deploy a
    /// policy under a different power budget than it was trained for.
    pub power_scale: f64,
    /// Feasibility rule applied to each BS's power row.
    pub constraint_mode: ConstraintMode,
}

impl Default for RolloutOptions {
    fn default() -> Self {
        RolloutOptions {
            sigma_floor: false,
            power_scale: 1.0,
            constraint_mode: ConstraintMode::PerUser,
        }
    }
}

/// One decision's full record: the sampling head, the pre-clamp draw and its
/// density, and the feasible power row derived from it. `mean_power` is the
/// head mean pushed through the same deterministic feasibility map, used as
/// the critic's action encoding.
struct StepDecision {
    mean: Vec<f64>,
    log_std: Vec<f64>,
    raw: Vec<f64>,
    log_prob: f64,
    power: Vec<f64>,
    mean_power: Vec<f64>,
}

/// Forward pass + action sample for one decision. Clamps to `[0, Pmax]`;
/// row-level feasibility projection is the caller's job because the
/// centralized action spans several rows.
fn decide(
    policy: &PolicyNetwork,
    theta: &ParamVector,
    state: &[f64],
    pmax_watts: f64,
    opts: &RolloutOptions,
    rng: &mut impl Rng,
) -> Result<StepDecision> {
    let mut head = policy.forward_policy(theta, state)?;
    if opts.sigma_floor {
        for v in &mut head.log_std {
            *v = policy.log_std_min();
        }
    }
    let sampled = sample_action(&head, rng, pmax_watts);
    let power = sampled
        .raw
        .iter()
        .map(|&a| (a * opts.power_scale).clamp(0.0, pmax_watts))
        .collect();
    let mean_power = head
        .mean
        .iter()
        .map(|&m| (m * opts.power_scale).clamp(0.0, pmax_watts))
        .collect();
    Ok(StepDecision {
        mean: head.mean,
        log_std: head.log_std,
        raw: sampled.raw,
        log_prob: sampled.log_prob,
        power,
        mean_power,
    })
}

fn fractions(row: &[f64], pmax_watts: f64) -> Vec<f64> {
    row.iter().map(|&p| p / pmax_watts).collect()
}

/// Plays one episode of the agent's scheme on the given channel realization
/// and reports the wall-clock seconds spent inside the decision path (state
/// encoding, policy forward, sampling, and feasibility projection — but not
/// channel generation or the reward computation).
pub fn play_episode_timed(
    agent: &Agent,
    theta: &ParamVector,
    h: &ChannelTensor,
    cfg: &NetworkConfig,
    norm: &NormalizationConstants,
    opts: &RolloutOptions,
    rng: &mut impl Rng,
) -> Result<(Episode, f64)> {
    if h.num_cells() != cfg.num_cells || h.users_per_cell() != cfg.users_per_cell {
        return Err(Error::Shape(format!(
            "channel tensor is {}×{} users but the config says {}×{}",
            h.num_cells(),
            h.users_per_cell(),
            cfg.num_cells,
            cfg.users_per_cell
        )));
    }
    if !(opts.power_scale.is_finite() && opts.power_scale > 0.0) {
        return Err(Error::Config(format!(
            "power scale must be positive, got {}",
            opts.power_scale
        )));
    }
    match agent.scheme {
        SchemeTag::Centralized => play_centralized(agent, theta, h, cfg, norm, opts, rng),
        SchemeTag::PartiallyDecentralized => play_partial(agent, theta, h, cfg, norm, opts, rng),
        SchemeTag::FullyDecentralized => play_full(agent, theta, h, cfg, norm, opts, rng),
    }
}

/// As [`play_episode_timed`], discarding the timing.
pub fn play_episode(
    agent: &Agent,
    theta: &ParamVector,
    h: &ChannelTensor,
    cfg: &NetworkConfig,
    norm: &NormalizationConstants,
    opts: &RolloutOptions,
    rng: &mut impl Rng,
) -> Result<Episode> {
    play_episode_timed(agent, theta, h, cfg, norm, opts, rng).map(|(ep, _)| ep)
}

/// Draws fresh geometry and fading, then plays one episode on it.
pub fn rollout_episode(
    agent: &Agent,
    theta: &ParamVector,
    cfg: &NetworkConfig,
    norm: &NormalizationConstants,
    opts: &RolloutOptions,
    rng: &mut impl Rng,
) -> Result<Episode> {
    let geom = sample_geometry(cfg, rng)?;
    let h = sample_channels(&geom, cfg, rng);
    play_episode(agent, theta, &h, cfg, norm, opts, rng)
}

fn play_centralized(
    agent: &Agent,
    theta: &ParamVector,
    h: &ChannelTensor,
    cfg: &NetworkConfig,
    norm: &NormalizationConstants,
    opts: &RolloutOptions,
    rng: &mut impl Rng,
) -> Result<(Episode, f64)> {
    let (b, k) = (cfg.num_cells, cfg.users_per_cell);
    let pmax = cfg.pmax_watts();

    let t0 = Instant::now();
    let state = encode_csi(h, SchemeTag::Centralized, 0, norm)?;
    let mut d = decide(&agent.policy, theta, &state, pmax, opts, rng)?;
    for row in 0..b {
        project_power_row(
            &mut d.power[row * k..(row + 1) * k],
            pmax,
            opts.constraint_mode,
        );
    }
    let decision_secs = t0.elapsed().as_secs_f64();

    for row in 0..b {
        project_power_row(
            &mut d.mean_power[row * k..(row + 1) * k],
            pmax,
            opts.constraint_mode,
        );
    }
    let powers = PowerMatrix::from_rows(b, k, d.power.clone())?;
    let reward = sum_rate(h, &powers, noise_power(cfg), cfg.bandwidth_hz);
    let step = Transition {
        state,
        power_frac: fractions(&d.power, pmax),
        mean_frac: fractions(&d.mean_power, pmax),
        power: d.power,
        raw_action: d.raw,
        mean: d.mean,
        log_std: d.log_std,
        log_prob: d.log_prob,
        reward,
        disc_exp: 0,
    };
    Ok((
        Episode {
            steps: vec![step],
            channels: h.clone(),
            powers,
            sum_rate_bps: reward,
        },
        decision_secs,
    ))
}

fn play_partial(
    agent: &Agent,
    theta: &ParamVector,
    h: &ChannelTensor,
    cfg: &NetworkConfig,
    norm: &NormalizationConstants,
    opts: &RolloutOptions,
    rng: &mut impl Rng,
) -> Result<(Episode, f64)> {
    let (b, k) = (cfg.num_cells, cfg.users_per_cell);
    let pmax = cfg.pmax_watts();

    // Fresh acting order every episode. Written out so the draw count is
    // pinned: exactly B−1 draws, none at all for a single cell.
    let mut order: Vec<usize> = (0..b).collect();
    for i in (1..b).rev() {
        let j = rng.random_range(0..=i);
        order.swap(i, j);
    }

    let mut prior: Vec<f64> = Vec::with_capacity((b.max(1) - 1) * k);
    let mut powers = PowerMatrix::zeros(b, k);
    let mut decisions: Vec<(Vec<f64>, StepDecision)> = Vec::with_capacity(b);
    let mut decision_secs = 0.0;
    for &bs in &order {
        let t0 = Instant::now();
        let state = encode_partial_state(h, bs, &prior, pmax, norm)?;
        let mut d = decide(&agent.policy, theta, &state, pmax, opts, rng)?;
        project_power_row(&mut d.power, pmax, opts.constraint_mode);
        decision_secs += t0.elapsed().as_secs_f64();

        for (kk, &p) in d.power.iter().enumerate() {
            powers.set(bs, kk, p);
        }
        prior.extend_from_slice(&d.power);
        decisions.push((state, d));
    }

    let reward = sum_rate(h, &powers, noise_power(cfg), cfg.bandwidth_hz);
    let steps = assemble_terminal_reward_steps(decisions, reward, pmax, opts);
    Ok((
        Episode {
            steps,
            channels: h.clone(),
            powers,
            sum_rate_bps: reward,
        },
        decision_secs,
    ))
}

fn play_full(
    agent: &Agent,
    theta: &ParamVector,
    h: &ChannelTensor,
    cfg: &NetworkConfig,
    norm: &NormalizationConstants,
    opts: &RolloutOptions,
    rng: &mut impl Rng,
) -> Result<(Episode, f64)> {
    let (b, k) = (cfg.num_cells, cfg.users_per_cell);
    let pmax = cfg.pmax_watts();

    // No BS's state depends on another's action, so the decisions are
    // conceptually simultaneous; index order just keeps replays fixed.
    let mut powers = PowerMatrix::zeros(b, k);
    let mut decisions: Vec<(Vec<f64>, StepDecision)> = Vec::with_capacity(b);
    let mut decision_secs = 0.0;
    for bs in 0..b {
        let t0 = Instant::now();
        let state = encode_csi(h, SchemeTag::FullyDecentralized, bs, norm)?;
        let mut d = decide(&agent.policy, theta, &state, pmax, opts, rng)?;
        project_power_row(&mut d.power, pmax, opts.constraint_mode);
        decision_secs += t0.elapsed().as_secs_f64();

        for (kk, &p) in d.power.iter().enumerate() {
            powers.set(bs, kk, p);
        }
        decisions.push((state, d));
    }

    let reward = sum_rate(h, &powers, noise_power(cfg), cfg.bandwidth_hz);
    let steps = assemble_terminal_reward_steps(decisions, reward, pmax, opts);
    Ok((
        Episode {
            steps,
            channels: h.clone(),
            powers,
            sum_rate_bps: reward,
        },
        decision_secs,
    ))
}

/// Builds the step records of a decentralized episode: zero reward
/// everywhere except the final step, which carries the network sum-rate.
fn assemble_terminal_reward_steps(
    decisions: Vec<(Vec<f64>, StepDecision)>,
    terminal_reward: f64,
    pmax: f64,
    opts: &RolloutOptions,
) -> Vec<Transition> {
    let last = decisions.len() - 1;
    decisions
        .into_iter()
        .enumerate()
        .map(|(pos, (state, mut d))| {
            project_power_row(&mut d.mean_power, pmax, opts.constraint_mode);
            Transition {
                state,
                power_frac: fractions(&d.power, pmax),
                mean_frac: fractions(&d.mean_power, pmax),
                power: d.power,
                raw_action: d.raw,
                mean: d.mean,
                log_std: d.log_std,
                log_prob: d.log_prob,
                reward: if pos == last { terminal_reward } else { 0.0 },
                disc_exp: pos as u32,
            }
        })
        .collect()
}

/// Samples `num_episodes` independent episodes in parallel, each owning the
/// random stream `(master, Rollout, iteration, episode)` so the batch is
/// identical no matter how the work is scheduled. `fixed_channels` replaces
/// the per-episode geometry+fading draw, turning the rollout into a repeated
/// play of one frozen realization.
pub fn sample_batch(
    agent: &Agent,
    theta: &ParamVector,
    cfg: &NetworkConfig,
    norm: &NormalizationConstants,
    opts: &RolloutOptions,
    fixed_channels: Option<&ChannelTensor>,
    master_seed: u64,
    iteration: u64,
    num_episodes: usize,
) -> Result<EpisodeBatch> {
    if num_episodes == 0 {
        return Err(Error::Config("need at least one episode per batch".into()));
    }
    let episodes: Vec<Episode> = (0..num_episodes)
        .into_par_iter()
        .map(|m| {
            let mut rng = stream(master_seed, Stream::Rollout, iteration, m as u64);
            match fixed_channels {
                Some(h) => play_episode(agent, theta, h, cfg, norm, opts, &mut rng),
                None => rollout_episode(agent, theta, cfg, norm, opts, &mut rng),
            }
        })
        .collect::<Result<Vec<_>>>()?;
    let batch = EpisodeBatch {
        episodes,
        scheme: agent.scheme,
        horizon: agent.scheme.horizon(cfg.num_cells),
    };
    batch.validate()?;
    Ok(batch)
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

/// One row of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    /// Mean terminal sum-rate over the iteration's episodes.
    pub mean_reward_bps: f64,
    /// Exponentially smoothed reward curve (weight [`SMOOTH_WEIGHT`] on the
    /// newest sample).
    pub smoothed_reward_bps: f64,
    /// Sampled mean KL of the accepted candidate; 0 when nothing was
    /// accepted or under the fixed-step updater.
    pub mean_kl: f64,
    /// Surrogate improvement of the accepted candidate; 0 when rejected.
    pub surrogate: f64,
    /// Backtracking exponent of the accepted candidate.
    pub j_used: usize,
    pub accepted: bool,
    /// Critic loss after this iteration's fit.
    pub critic_loss: f64,
    /// Wall-clock duration of the iteration. Excluded from determinism
    /// comparisons.
    pub wall_clock_ms: f64,
}

/// Train-time choices that are not hyperparameters of the update rule.
#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    pub constraint_mode: ConstraintMode,
    /// Freeze every episode to this channel realization instead of drawing
    /// fresh geometry+fading; used by single-link closed-form checks.
    pub fixed_channels: Option<ChannelTensor>,
}

/// Result of a training run.
#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub theta: ParamVector,
    pub phi: ParamVector,
    pub log: Vec<IterationRecord>,
    pub norm: NormalizationConstants,
    /// `Some(reason)` when training stopped early (diverging critic or
    /// non-finite parameters); the returned parameters are the last finite
    /// ones and the log covers the completed iterations.
    pub aborted: Option<String>,
}

struct IterationOutcome {
    theta: ParamVector,
    phi: ParamVector,
    mean_reward: f64,
    critic_loss: f64,
    kl: f64,
    surrogate: f64,
    j_used: usize,
    accepted: bool,
}

#[allow(clippy::too_many_arguments)]
fn train_iteration(
    agent: &Agent,
    theta: &ParamVector,
    phi: &ParamVector,
    cfg: &NetworkConfig,
    tcfg: &TrpoConfig,
    norm: &NormalizationConstants,
    opts: &RolloutOptions,
    fixed_channels: Option<&ChannelTensor>,
    reward_scale: f64,
    master_seed: u64,
    iteration: u64,
) -> Result<IterationOutcome> {
    let batch = sample_batch(
        agent,
        theta,
        cfg,
        norm,
        opts,
        fixed_channels,
        master_seed,
        iteration,
        tcfg.episodes_per_iter,
    )?;
    let mean_reward =
        batch.episodes.iter().map(|e| e.sum_rate_bps).sum::<f64>() / batch.num_episodes() as f64;

    let returns = batch_returns(&batch, tcfg.discount_gamma);
    let advantages =
        estimate_advantages(&agent.value, phi, &batch, tcfg.discount_gamma, reward_scale)?;
    let fit = fit_critic(
        &agent.value,
        phi,
        &batch,
        &returns,
        tcfg,
        reward_scale,
        &mut stream(master_seed, Stream::CriticShuffle, iteration, 0),
    )?;

    let outcome = |theta: ParamVector, kl: f64, surrogate: f64, j_used: usize, accepted: bool| {
        IterationOutcome {
            theta,
            phi: fit.phi.clone(),
            mean_reward,
            critic_loss: fit.final_loss,
            kl,
            surrogate,
            j_used,
            accepted,
        }
    };

    match tcfg.updater {
        UpdateRule::TrustRegion => {
            let table = ScoreTable::compute(&agent.policy, theta, &batch, tcfg.discount_gamma)?;
            let g = table.policy_gradient(&advantages.normalized)?;
            let sol = conjugate_gradient(
                |v| table.fisher_vector_product(v, tcfg.fisher_damping),
                g.values(),
                tcfg.cg_iters,
                tcfg.cg_tol,
            )?;
            let delta = match natural_step(g.values(), &sol.x, tcfg.kl_delta) {
                Ok(d) => ParamVector::from_values(agent.policy.shape().clone(), d)?,
                // No usable step direction this iteration; keep the
                // parameters and move on.
                Err(Error::DegenerateStep(_)) => {
                    return Ok(outcome(theta.clone(), 0.0, 0.0, tcfg.max_backtracks, false));
                }
                Err(e) => return Err(e),
            };
            let ls = line_search_update(
                &agent.policy,
                theta,
                &delta,
                &batch,
                &advantages.normalized,
                tcfg,
            )?;
            if !ls.theta.all_finite() {
                return Err(Error::Training(
                    "non-finite policy parameters after update".into(),
                ));
            }
            Ok(outcome(
                ls.theta,
                ls.kl,
                ls.surrogate,
                ls.j_used,
                ls.accepted,
            ))
        }
        UpdateRule::FixedStep => {
            let new_theta = a2c_update(
                &agent.policy,
                theta,
                &batch,
                &advantages.normalized,
                tcfg.discount_gamma,
                tcfg.fixed_step_size,
            )?;
            if !new_theta.all_finite() {
                return Err(Error::Training(
                    "non-finite policy parameters after update".into(),
                ));
            }
            Ok(outcome(new_theta, 0.0, 0.0, 0, true))
        }
    }
}

/// Runs the full training loop for one scheme: per iteration, sample a batch
/// of episodes under the frozen parameters, estimate advantages, fit the
/// critic, and apply the configured policy update. Every random draw comes
/// from a stream derived from `master_seed`, so reruns are bit-identical.
///
/// A diverging critic or non-finite parameters stop the run early, returning
/// the last finite parameters with `aborted` set instead of an error.
pub fn train(
    scheme: SchemeTag,
    cfg: &NetworkConfig,
    tcfg: &TrpoConfig,
    iterations: usize,
    options: &TrainOptions,
    master_seed: u64,
) -> Result<TrainOutput> {
    cfg.validate()?;
    tcfg.validate()?;
    if let Some(h) = &options.fixed_channels {
        if h.num_cells() != cfg.num_cells || h.users_per_cell() != cfg.users_per_cell {
            return Err(Error::Config(format!(
                "fixed channels are {}×{} users but the config says {}×{}",
                h.num_cells(),
                h.users_per_cell(),
                cfg.num_cells,
                cfg.users_per_cell
            )));
        }
    }

    let agent = Agent::new(scheme, cfg, tcfg)?;
    let mut theta = agent
        .policy
        .init_params(&mut stream(master_seed, Stream::PolicyInit, 0, 0));
    let mut phi = agent
        .value
        .init_params(&mut stream(master_seed, Stream::ValueInit, 0, 0));
    let norm = compute_normalization(
        scheme,
        cfg,
        NORMALIZATION_REALIZATIONS,
        &mut stream(master_seed, Stream::Normalization, 0, 0),
    )?;
    let opts = RolloutOptions {
        constraint_mode: options.constraint_mode,
        ..RolloutOptions::default()
    };
    // The critic works on returns in units of spectral efficiency rather
    // than bits/s, keeping its targets O(1).
    let reward_scale = cfg.bandwidth_hz;

    let mut log = Vec::with_capacity(iterations);
    let mut smoothed = 0.0;
    let mut aborted = None;
    for iteration in 0..iterations {
        let t0 = Instant::now();
        match train_iteration(
            &agent,
            &theta,
            &phi,
            cfg,
            tcfg,
            &norm,
            &opts,
            options.fixed_channels.as_ref(),
            reward_scale,
            master_seed,
            iteration as u64,
        ) {
            Ok(o) => {
                theta = o.theta;
                phi = o.phi;
                smoothed = if iteration == 0 {
                    o.mean_reward
                } else {
                    SMOOTH_WEIGHT * o.mean_reward + (1.0 - SMOOTH_WEIGHT) * smoothed
                };
                log.push(IterationRecord {
                    iteration,
                    mean_reward_bps: o.mean_reward,
                    smoothed_reward_bps: smoothed,
                    mean_kl: o.kl,
                    surrogate: o.surrogate,
                    j_used: o.j_used,
                    accepted: o.accepted,
                    critic_loss: o.critic_loss,
                    wall_clock_ms: t0.elapsed().as_secs_f64() * 1e3,
                });
            }
            Err(Error::Training(msg)) | Err(Error::Numerical(msg)) => {
                aborted = Some(format!("iteration {iteration}: {msg}"));
                break;
            }
            Err(e) => return Err(e),
        }
    }
    Ok(TrainOutput {
        theta,
        phi,
        log,
        norm,
        aborted,
    })
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

/// Distribution summary of sum-rates over independent channel realizations.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalSummary {
    pub n_realizations: usize,
    pub mean_bps: f64,
    /// Sample standard deviation (0 for a single realization).
    pub std_bps: f64,
    /// Nearest-rank percentiles.
    pub p05_bps: f64,
    pub p50_bps: f64,
    pub p95_bps: f64,
    /// Mean wall-clock per decision. Indicative only — the timing harness
    /// measures this single-threaded.
    pub mean_decision_ms: f64,
    /// Per-realization sum-rates, in realization order.
    pub sum_rates_bps: Vec<f64>,
}

/// Smallest value with at least `q` of the distribution at or below it
/// (nearest-rank percentile on an ascending-sorted slice).
pub fn nearest_rank_percentile(sorted: &[f64], q: f64) -> f64 {
    debug_assert!(!sorted.is_empty() && (0.0..=1.0).contains(&q));
    let rank = (q * sorted.len() as f64).ceil().max(1.0) as usize;
    sorted[rank.min(sorted.len()) - 1]
}

impl EvalSummary {
    /// Summarizes per-realization sum-rates plus the total decision time
    /// spent producing them (`decisions_per_realization` decisions each).
    pub fn from_samples(
        sum_rates_bps: Vec<f64>,
        total_decision_secs: f64,
        decisions_per_realization: usize,
    ) -> Result<EvalSummary> {
        let n = sum_rates_bps.len();
        if n == 0 || decisions_per_realization == 0 {
            return Err(Error::Config(
                "need at least one realization and one decision".into(),
            ));
        }
        if !sum_rates_bps.iter().all(|r| r.is_finite()) {
            return Err(Error::Numerical("non-finite sum-rate sample".into()));
        }
        let mean = sum_rates_bps.iter().sum::<f64>() / n as f64;
        let std = if n > 1 {
            (sum_rates_bps
                .iter()
                .map(|r| (r - mean) * (r - mean))
                .sum::<f64>()
                / (n - 1) as f64)
                .sqrt()
        } else {
            0.0
        };
        let mut sorted = sum_rates_bps.clone();
        sorted.sort_by(|a, b| a.total_cmp(b));
        Ok(EvalSummary {
            n_realizations: n,
            mean_bps: mean,
            std_bps: std,
            p05_bps: nearest_rank_percentile(&sorted, 0.05),
            p50_bps: nearest_rank_percentile(&sorted, 0.50),
            p95_bps: nearest_rank_percentile(&sorted, 0.95),
            mean_decision_ms: total_decision_secs * 1e3 / (n * decisions_per_realization) as f64,
            sum_rates_bps,
        })
    }
}

/// Evaluates a trained policy over independent channel realizations with the
/// policy noise at its floor. Realization `i` draws its channels from the
/// stream `(master, EvalChannel, i, 0)` — shared by every method evaluated
/// under the same master seed — and its action noise from
/// `(master, EvalAction, i, method_tag)`, so different methods never consume
/// each other's randomness.
pub fn evaluate(
    agent: &Agent,
    theta: &ParamVector,
    cfg: &NetworkConfig,
    norm: &NormalizationConstants,
    opts: &RolloutOptions,
    n_realizations: usize,
    master_seed: u64,
    method_tag: u64,
) -> Result<EvalSummary> {
    if n_realizations == 0 {
        return Err(Error::Config(
            "need at least one evaluation realization".into(),
        ));
    }
    let eval_opts = RolloutOptions {
        sigma_floor: true,
        ..opts.clone()
    };
    let results: Vec<(f64, f64)> = (0..n_realizations)
        .into_par_iter()
        .map(|i| {
            let mut rng_ch = stream(master_seed, Stream::EvalChannel, i as u64, 0);
            let geom = sample_geometry(cfg, &mut rng_ch)?;
            let h = sample_channels(&geom, cfg, &mut rng_ch);
            let mut rng_act = stream(master_seed, Stream::EvalAction, i as u64, method_tag);
            let (ep, secs) =
                play_episode_timed(agent, theta, &h, cfg, norm, &eval_opts, &mut rng_act)?;
            Ok((ep.sum_rate_bps, secs))
        })
        .collect::<Result<Vec<_>>>()?;
    let rates = results.iter().map(|(r, _)| *r).collect();
    let total_secs = results.iter().map(|(_, s)| *s).sum();
    EvalSummary::from_samples(rates, total_secs, agent.scheme.horizon(cfg.num_cells))
}
