//! Trust-region policy optimization on sampled episode batches.
//!
//! The update pipeline, given a batch of episodes sampled under the current
//! policy parameters θ:
//!
//! 1. discounted returns per step ([`discounted_returns`], [`batch_returns`]);
//! 2. advantages against the critic's value at the policy-mean action,
//!    batch-normalized ([`estimate_advantages`]);
//! 3. critic refit on the sampled (state, action) → return pairs
//!    ([`fit_critic`]);
//! 4. score table of per-sample log-density gradients ([`ScoreTable`]),
//!    yielding the policy-gradient estimate and Fisher–vector products;
//! 5. conjugate-gradient solve of `F x = g` ([`conjugate_gradient`]);
//! 6. step scaled to the trust region radius ([`natural_step`]);
//! 7. backtracking line search accepting the first candidate with
//!    non-negative surrogate improvement and in-bound mean KL
//!    ([`line_search_update`]).
//!
//! A fixed-step variant ([`a2c_update`]) shares the same gradient estimator
//! and critic but applies `θ + α·g` directly, with no curvature or search.
//!
//! Everything here is scheme-agnostic: episodes carry their own states,
//! actions and rewards, and the discount exponent of each step is stored
//! explicitly, so centralized one-step batches and sequential multi-step
//! batches flow through identical code.

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::agents::SchemeTag;
use crate::error::{Error, Result};
use crate::netmodel::{ChannelTensor, PowerMatrix};
use crate::neuralnet::{GaussianHead, NetShape, ParamVector, PolicyNetwork, ValueNetwork};

/// Fixed chunk length for deterministic parallel accumulation: chunks are
/// summed in parallel, then folded in index order, so results are
/// bit-identical across runs and across worker-thread counts.
const ACC_CHUNK: usize = 64;

/// Guard below which the advantage spread counts as degenerate and
/// normalization only centers (no division).
const ADV_STD_FLOOR: f64 = 1e-12;

// ---------------------------------------------------------------------------
// Batch types
// ---------------------------------------------------------------------------

/// One decision step as recorded during a rollout.
#[derive(Debug, Clone)]
pub struct Transition {
    /// Normalized observation fed to the policy.
    pub state: Vec<f64>,
    /// Feasible power vector applied to the network (watts).
    pub power: Vec<f64>,
    /// Pre-clamp Gaussian draw the log-density refers to.
    pub raw_action: Vec<f64>,
    /// Policy head mean at sampling time (watts, unclamped).
    pub mean: Vec<f64>,
    /// Policy head log-standard deviation at sampling time (already clamped).
    pub log_std: Vec<f64>,
    /// Log-density of `raw_action` under the sampling head.
    pub log_prob: f64,
    /// Reward collected at this step (bits/s; zero on non-terminal steps of
    /// sequential schemes).
    pub reward: f64,
    /// Discount exponent of this step: 0 for the first decision of an
    /// episode, increasing by one per subsequent decision.
    pub disc_exp: u32,
    /// Applied power as a fraction of the per-link budget, for critic input.
    pub power_frac: Vec<f64>,
    /// Clamped head mean as a fraction of the per-link budget, for the
    /// critic's value at the policy-mean action.
    pub mean_frac: Vec<f64>,
}

/// One episode: an ordered run of decisions over a single channel draw.
#[derive(Debug, Clone)]
pub struct Episode {
    pub steps: Vec<Transition>,
    /// Channel realization the episode was played on (kept for replay checks
    /// and diagnostics).
    pub channels: ChannelTensor,
    /// Final network-wide power allocation (watts).
    pub powers: PowerMatrix,
    /// Network sum-rate of the final allocation (bits/s).
    pub sum_rate_bps: f64,
}

impl Episode {
    /// Undiscounted total reward of the episode.
    pub fn total_reward(&self) -> f64 {
        self.steps.iter().map(|t| t.reward).sum()
    }
}

/// A batch of `M` episodes sampled under one set of policy parameters.
#[derive(Debug, Clone)]
pub struct EpisodeBatch {
    pub episodes: Vec<Episode>,
    pub scheme: SchemeTag,
    /// Decisions per episode (`N`); 1 for the centralized scheme, the number
    /// of cells for the sequential and simultaneous decentralized schemes.
    pub horizon: usize,
}

impl EpisodeBatch {
    pub fn num_episodes(&self) -> usize {
        self.episodes.len()
    }

    /// Total number of decision steps `M·N`.
    pub fn num_steps(&self) -> usize {
        self.episodes.len() * self.horizon
    }

    /// All transitions in episode-major order (episode 0 step 0, episode 0
    /// step 1, …). All flat per-step vectors in this module use this order.
    pub fn flat(&self) -> Vec<&Transition> {
        self.episodes.iter().flat_map(|e| e.steps.iter()).collect()
    }

    /// Structural checks: non-empty, every episode exactly `horizon` steps,
    /// consistent state/action dimensions, discount exponents equal to the
    /// step index.
    pub fn validate(&self) -> Result<()> {
        if self.episodes.is_empty() {
            return Err(Error::Shape("episode batch is empty".into()));
        }
        if self.horizon == 0 {
            return Err(Error::Shape("episode horizon must be at least 1".into()));
        }
        let first = &self.episodes[0].steps;
        if first.is_empty() {
            return Err(Error::Shape(
                "episodes must contain at least one step".into(),
            ));
        }
        let state_dim = first[0].state.len();
        let action_dim = first[0].raw_action.len();
        for (m, ep) in self.episodes.iter().enumerate() {
            if ep.steps.len() != self.horizon {
                return Err(Error::Shape(format!(
                    "episode {m} has {} steps, expected horizon {}",
                    ep.steps.len(),
                    self.horizon
                )));
            }
            for (n, t) in ep.steps.iter().enumerate() {
                if t.state.len() != state_dim
                    || t.raw_action.len() != action_dim
                    || t.power.len() != action_dim
                    || t.mean.len() != action_dim
                    || t.log_std.len() != action_dim
                    || t.power_frac.len() != action_dim
                    || t.mean_frac.len() != action_dim
                {
                    return Err(Error::Shape(format!(
                        "episode {m} step {n} has inconsistent state/action dimensions"
                    )));
                }
                if t.disc_exp as usize != n {
                    return Err(Error::Shape(format!(
                        "episode {m} step {n} carries discount exponent {}",
                        t.disc_exp
                    )));
                }
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

/// Which update rule the training loop applies each iteration.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UpdateRule {
    /// Natural-gradient step with KL trust region and backtracking search.
    TrustRegion,
    /// Fixed-step policy-gradient ascent (advantage actor-critic style).
    FixedStep,
}

impl UpdateRule {
    pub fn as_str(self) -> &'static str {
        match self {
            UpdateRule::TrustRegion => "trpo",
            UpdateRule::FixedStep => "a2c",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "trpo" => Ok(UpdateRule::TrustRegion),
            "a2c" => Ok(UpdateRule::FixedStep),
            other => Err(Error::Parse(format!("unknown update rule `{other}`"))),
        }
    }
}

impl Serialize for UpdateRule {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(self.as_str())
    }
}

impl<'de> Deserialize<'de> for UpdateRule {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let tag = String::deserialize(d)?;
        UpdateRule::parse(&tag).map_err(serde::de::Error::custom)
    }
}

/// Hyper-parameters of the policy/critic update.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrpoConfig {
    /// Trust-region radius δ: upper bound on the sampled mean KL divergence.
    pub kl_delta: f64,
    /// Backtracking factor ζ ∈ (0, 1); candidate `j` scales the step by ζ^j.
    pub step_zeta: f64,
    /// Discount factor γ ∈ [0, 1].
    pub discount_gamma: f64,
    /// Episodes sampled per training iteration (`M`).
    pub episodes_per_iter: usize,
    /// Maximum conjugate-gradient iterations.
    pub cg_iters: usize,
    /// Residual-norm stopping threshold for conjugate gradient.
    pub cg_tol: f64,
    /// Damping λ added to the Fisher estimate: `F + λI`.
    pub fisher_damping: f64,
    /// Largest backtracking exponent tried (candidates `j = 0..=max_backtracks`).
    pub max_backtracks: usize,
    /// Critic gradient-descent learning rate.
    pub critic_lr: f64,
    /// Critic passes over the batch per iteration.
    pub critic_epochs: usize,
    /// Critic minibatch size.
    pub critic_minibatch: usize,
    /// Hidden layers in both policy and critic networks.
    pub hidden_layers: usize,
    /// Units per hidden layer.
    pub hidden_units: usize,
    /// Update rule applied each iteration.
    pub updater: UpdateRule,
    /// Step size for the fixed-step update rule.
    pub fixed_step_size: f64,
}

impl Default for TrpoConfig {
    fn default() -> Self {
        TrpoConfig {
            kl_delta: 0.01,
            step_zeta: 0.90,
            discount_gamma: 0.99,
            episodes_per_iter: 1000,
            cg_iters: 10,
            cg_tol: 1e-8,
            fisher_damping: 1e-2,
            max_backtracks: 10,
            critic_lr: 1e-3,
            critic_epochs: 5,
            critic_minibatch: 64,
            hidden_layers: 3,
            hidden_units: 256,
            updater: UpdateRule::TrustRegion,
            fixed_step_size: 7e-4,
        }
    }
}

impl TrpoConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.kl_delta > 0.0 && self.kl_delta.is_finite()) {
            return Err(Error::Config(format!(
                "kl_delta must be positive, got {}",
                self.kl_delta
            )));
        }
        if !(self.step_zeta > 0.0 && self.step_zeta < 1.0) {
            return Err(Error::Config(format!(
                "step_zeta must lie in (0, 1), got {}",
                self.step_zeta
            )));
        }
        if !(0.0..=1.0).contains(&self.discount_gamma) {
            return Err(Error::Config(format!(
                "discount_gamma must lie in [0, 1], got {}",
                self.discount_gamma
            )));
        }
        if self.episodes_per_iter == 0 {
            return Err(Error::Config("episodes_per_iter must be at least 1".into()));
        }
        if self.cg_iters == 0 {
            return Err(Error::Config("cg_iters must be at least 1".into()));
        }
        if !(self.cg_tol > 0.0) {
            return Err(Error::Config(format!(
                "cg_tol must be positive, got {}",
                self.cg_tol
            )));
        }
        if !(self.fisher_damping >= 0.0 && self.fisher_damping.is_finite()) {
            return Err(Error::Config(format!(
                "fisher_damping must be non-negative, got {}",
                self.fisher_damping
            )));
        }
        if !(self.critic_lr >= 0.0 && self.critic_lr.is_finite()) {
            return Err(Error::Config(format!(
                "critic_lr must be non-negative, got {}",
                self.critic_lr
            )));
        }
        if self.critic_epochs == 0 || self.critic_minibatch == 0 {
            return Err(Error::Config(
                "critic_epochs and critic_minibatch must be at least 1".into(),
            ));
        }
        if self.hidden_layers == 0 || self.hidden_units == 0 {
            return Err(Error::Config(
                "hidden_layers and hidden_units must be at least 1".into(),
            ));
        }
        if !(self.fixed_step_size > 0.0 && self.fixed_step_size.is_finite()) {
            return Err(Error::Config(format!(
                "fixed_step_size must be positive, got {}",
                self.fixed_step_size
            )));
        }
        Ok(())
    }

    /// Hidden-layer widths as a slice-friendly vector.
    pub fn hidden_sizes(&self) -> Vec<usize> {
        vec![self.hidden_units; self.hidden_layers]
    }
}

// ---------------------------------------------------------------------------
// Returns and advantages
// ---------------------------------------------------------------------------

/// Discounted return of every step: `G_n = Σ_{n' ≥ n} γ^{n'−n} r_{n'}`.
pub fn discounted_returns(rewards: &[f64], gamma: f64) -> Vec<f64> {
    let mut out = vec![0.0; rewards.len()];
    let mut acc = 0.0;
    for (i, &r) in rewards.iter().enumerate().rev() {
        acc = r + gamma * acc;
        out[i] = acc;
    }
    out
}

/// Discounted returns for every step of the batch, flattened episode-major.
pub fn batch_returns(batch: &EpisodeBatch, gamma: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(batch.num_steps());
    for ep in &batch.episodes {
        let rewards: Vec<f64> = ep.steps.iter().map(|t| t.reward).collect();
        out.extend(discounted_returns(&rewards, gamma));
    }
    out
}

/// Critic input for the action actually sampled at this step.
pub fn critic_sample_input(t: &Transition) -> Vec<f64> {
    let mut v = Vec::with_capacity(t.state.len() + 2 * t.power_frac.len());
    v.extend_from_slice(&t.state);
    v.extend_from_slice(&t.power_frac);
    v.extend_from_slice(&t.log_std);
    v
}

/// Critic input for the policy-mean action at this step (used as the value
/// baseline when estimating advantages).
pub fn critic_mean_input(t: &Transition) -> Vec<f64> {
    let mut v = Vec::with_capacity(t.state.len() + 2 * t.mean_frac.len());
    v.extend_from_slice(&t.state);
    v.extend_from_slice(&t.mean_frac);
    v.extend_from_slice(&t.log_std);
    v
}

/// Advantages per step, both before and after batch normalization, in
/// units of `return / reward_scale`.
#[derive(Debug, Clone)]
pub struct Advantages {
    /// `G/reward_scale − V̂(state, policy-mean action)` per step.
    pub raw: Vec<f64>,
    /// `raw` shifted to zero mean and scaled to unit variance; if the spread
    /// is below the degeneracy floor only the centering is applied.
    pub normalized: Vec<f64>,
}

fn check_reward_scale(reward_scale: f64) -> Result<()> {
    if !(reward_scale > 0.0 && reward_scale.is_finite()) {
        return Err(Error::Config(format!(
            "reward_scale must be positive and finite, got {reward_scale}"
        )));
    }
    Ok(())
}

/// Advantage of every step against the critic's value at the policy-mean
/// action, normalized across the batch. Returns are divided by
/// `reward_scale` before the critic value is subtracted, so the critic
/// always works on O(1) targets regardless of the reward's physical unit;
/// the normalized advantages are invariant to that choice whenever the
/// critic is consistent with it.
pub fn estimate_advantages(
    value: &ValueNetwork,
    phi: &ParamVector,
    batch: &EpisodeBatch,
    gamma: f64,
    reward_scale: f64,
) -> Result<Advantages> {
    batch.validate()?;
    check_reward_scale(reward_scale)?;
    let returns = batch_returns(batch, gamma);
    let flat = batch.flat();
    let values: Vec<f64> = flat
        .par_iter()
        .map(|t| value.forward_concat(phi, &critic_mean_input(t)))
        .collect::<Result<Vec<_>>>()?;
    let raw: Vec<f64> = returns
        .iter()
        .zip(&values)
        .map(|(g, v)| g / reward_scale - v)
        .collect();
    if raw.iter().any(|a| !a.is_finite()) {
        return Err(Error::Numerical("non-finite advantage estimate".into()));
    }
    Ok(Advantages {
        normalized: normalize_advantages(&raw),
        raw,
    })
}

/// Shifts to zero mean; divides by the standard deviation unless the spread
/// is degenerate (below `1e-12`), in which case only the centering applies.
pub fn normalize_advantages(raw: &[f64]) -> Vec<f64> {
    let n = raw.len() as f64;
    let mean = raw.iter().sum::<f64>() / n;
    let var = raw.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / n;
    let std = var.sqrt();
    if std < ADV_STD_FLOOR {
        raw.iter().map(|a| a - mean).collect()
    } else {
        raw.iter().map(|a| (a - mean) / std).collect()
    }
}

/// Result of one critic fit.
#[derive(Debug, Clone)]
pub struct CriticFit {
    pub phi: ParamVector,
    /// Mean squared error over the whole batch after the final epoch, in the
    /// scaled-return unit.
    pub final_loss: f64,
}

/// Fits the critic to the sampled `(state, action) → G/reward_scale` pairs
/// by minibatch gradient descent on the mean squared error: `critic_epochs`
/// shuffled passes of `critic_minibatch`-sized steps at rate `critic_lr`.
/// Non-finite parameters or losses abort with a training error instead of
/// propagating NaNs.
pub fn fit_critic(
    value: &ValueNetwork,
    phi: &ParamVector,
    batch: &EpisodeBatch,
    returns: &[f64],
    cfg: &TrpoConfig,
    reward_scale: f64,
    rng: &mut impl Rng,
) -> Result<CriticFit> {
    batch.validate()?;
    check_reward_scale(reward_scale)?;
    let flat = batch.flat();
    if returns.len() != flat.len() {
        return Err(Error::Shape(format!(
            "got {} returns for {} batch steps",
            returns.len(),
            flat.len()
        )));
    }
    let inputs: Vec<Vec<f64>> = flat.iter().map(|t| critic_sample_input(t)).collect();
    let targets: Vec<f64> = returns.iter().map(|g| g / reward_scale).collect();

    let mean_loss = |phi_at: &ParamVector| -> Result<f64> {
        let mut scratch = vec![0.0; phi.len()];
        let mut loss = 0.0;
        for (input, target) in inputs.iter().zip(&targets) {
            loss += value.squared_error_grad_into(phi_at, input, *target, 0.0, &mut scratch)?;
        }
        Ok(loss / inputs.len() as f64)
    };
    // Losses far beyond the starting loss mean the descent has blown up; a
    // healthy fit only ever reduces the batch loss up to minibatch noise.
    let initial_loss = mean_loss(phi)?;
    let divergence_cap = 1e9 * (initial_loss.abs() + 1.0);

    let mut phi_new = phi.clone();
    let mut grad = vec![0.0; phi.len()];
    let mut indices: Vec<usize> = (0..inputs.len()).collect();
    for _ in 0..cfg.critic_epochs {
        indices.shuffle(rng);
        for chunk in indices.chunks(cfg.critic_minibatch) {
            grad.iter_mut().for_each(|g| *g = 0.0);
            let weight = 1.0 / chunk.len() as f64;
            let mut chunk_loss = 0.0;
            for &i in chunk {
                chunk_loss += value
                    .squared_error_grad_into(&phi_new, &inputs[i], targets[i], weight, &mut grad)?;
            }
            let chunk_mse = chunk_loss / chunk.len() as f64;
            if !chunk_mse.is_finite() || chunk_mse > divergence_cap {
                return Err(Error::Training(format!(
                    "critic loss diverged during fitting ({chunk_mse:.3e} from {initial_loss:.3e})"
                )));
            }
            for (p, g) in phi_new.values_mut().iter_mut().zip(&grad) {
                *p -= cfg.critic_lr * g;
            }
        }
        if !phi_new.all_finite() {
            return Err(Error::Training(
                "critic parameters diverged during fitting".into(),
            ));
        }
    }

    let final_loss = mean_loss(&phi_new)?;
    if !final_loss.is_finite() || final_loss > divergence_cap {
        return Err(Error::Training(format!(
            "critic loss diverged during fitting ({final_loss:.3e} from {initial_loss:.3e})"
        )));
    }
    Ok(CriticFit {
        phi: phi_new,
        final_loss,
    })
}

// ---------------------------------------------------------------------------
// Score table: policy gradient and Fisher–vector products
// ---------------------------------------------------------------------------

/// Per-sample log-density gradients (`∇_θ log π(a|s)`) for a whole batch,
/// with each sample's discount factor. Computed once per iteration and
/// reused by both the gradient estimate and every Fisher–vector product.
#[derive(Debug, Clone)]
pub struct ScoreTable {
    shape: NetShape,
    rows: Vec<Vec<f64>>,
    discounts: Vec<f64>,
}

impl ScoreTable {
    /// Backpropagates every transition of the batch under parameters
    /// `theta`. Row order is episode-major, matching [`EpisodeBatch::flat`].
    pub fn compute(
        policy: &PolicyNetwork,
        theta: &ParamVector,
        batch: &EpisodeBatch,
        gamma: f64,
    ) -> Result<ScoreTable> {
        batch.validate()?;
        let flat = batch.flat();
        let params = policy.shape().param_count();
        let rows: Vec<Vec<f64>> = flat
            .par_iter()
            .map(|t| {
                let mut row = vec![0.0; params];
                policy.log_prob_grad_into(theta, &t.state, &t.raw_action, &mut row)?;
                Ok(row)
            })
            .collect::<Result<Vec<_>>>()?;
        let discounts = flat.iter().map(|t| gamma.powi(t.disc_exp as i32)).collect();
        Ok(ScoreTable {
            shape: policy.shape().clone(),
            rows,
            discounts,
        })
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.rows[i]
    }

    pub fn discount(&self, i: usize) -> f64 {
        self.discounts[i]
    }

    /// Sample-mean policy-gradient estimate
    /// `g = (1/(M·N)) Σ_i γ^{d_i} Â_i ∇_θ log π_i`.
    pub fn policy_gradient(&self, advantages: &[f64]) -> Result<ParamVector> {
        if advantages.len() != self.rows.len() {
            return Err(Error::Shape(format!(
                "got {} advantages for {} scored samples",
                advantages.len(),
                self.rows.len()
            )));
        }
        let inv = 1.0 / self.rows.len() as f64;
        let weights: Vec<f64> = self
            .discounts
            .iter()
            .zip(advantages)
            .map(|(d, a)| d * a * inv)
            .collect();
        let g = accumulate_weighted_rows(&self.rows, &weights, self.shape.param_count());
        if !g.iter().all(|x| x.is_finite()) {
            return Err(Error::Numerical(
                "non-finite policy-gradient estimate".into(),
            ));
        }
        ParamVector::from_values(self.shape.clone(), g)
    }

    /// Damped Fisher–vector product under the score outer-product estimate:
    /// `F v = (1/(M·N)) Σ_i (s_i · v) s_i + λ v`.
    pub fn fisher_vector_product(&self, v: &[f64], damping: f64) -> Vec<f64> {
        assert_eq!(
            v.len(),
            self.shape.param_count(),
            "Fisher-vector product dimension mismatch"
        );
        let inv = 1.0 / self.rows.len() as f64;
        let weights: Vec<f64> = self.rows.par_iter().map(|row| dot(row, v) * inv).collect();
        let mut out = accumulate_weighted_rows(&self.rows, &weights, v.len());
        for (o, x) in out.iter_mut().zip(v) {
            *o += damping * x;
        }
        out
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `Σ_i w_i · rows_i`, parallelized over fixed-size chunks whose partial
/// sums are folded in index order — deterministic for any thread count.
fn accumulate_weighted_rows(rows: &[Vec<f64>], weights: &[f64], params: usize) -> Vec<f64> {
    debug_assert_eq!(rows.len(), weights.len());
    let partials: Vec<Vec<f64>> = rows
        .par_chunks(ACC_CHUNK)
        .zip(weights.par_chunks(ACC_CHUNK))
        .map(|(row_chunk, w_chunk)| {
            let mut acc = vec![0.0; params];
            for (row, &w) in row_chunk.iter().zip(w_chunk) {
                if w != 0.0 {
                    for (a, r) in acc.iter_mut().zip(row) {
                        *a += w * r;
                    }
                }
            }
            acc
        })
        .collect();
    let mut out = vec![0.0; params];
    for partial in partials {
        for (o, p) in out.iter_mut().zip(partial) {
            *o += p;
        }
    }
    out
}

/// One-call policy-gradient estimate; [`ScoreTable`] exposes the same
/// computation with the table reused across calls.
pub fn policy_gradient_estimate(
    policy: &PolicyNetwork,
    theta: &ParamVector,
    batch: &EpisodeBatch,
    advantages: &[f64],
    gamma: f64,
) -> Result<ParamVector> {
    ScoreTable::compute(policy, theta, batch, gamma)?.policy_gradient(advantages)
}

/// One-call damped Fisher–vector product; [`ScoreTable`] exposes the same
/// computation with the table reused across calls.
pub fn fisher_vector_product(
    policy: &PolicyNetwork,
    theta: &ParamVector,
    batch: &EpisodeBatch,
    v: &ParamVector,
    damping: f64,
) -> Result<ParamVector> {
    let table = ScoreTable::compute(policy, theta, batch, 1.0)?;
    let out = table.fisher_vector_product(v.values(), damping);
    ParamVector::from_values(policy.shape().clone(), out)
}

// ---------------------------------------------------------------------------
// Conjugate gradient and step sizing
// ---------------------------------------------------------------------------

/// Conjugate-gradient solve of `A x = g`.
#[derive(Debug, Clone)]
pub struct CgSolution {
    pub x: Vec<f64>,
    /// Euclidean norm of `g − A x` at termination.
    pub residual_norm: f64,
    /// Matrix–vector products performed.
    pub iterations: usize,
}

/// Solves `A x = g` for symmetric positive-definite `A` given only the
/// matrix–vector product `apply`. Starts from `x = 0` and stops after
/// `max_iters` products or when the residual norm drops below `tol`.
pub fn conjugate_gradient(
    apply: impl Fn(&[f64]) -> Vec<f64>,
    g: &[f64],
    max_iters: usize,
    tol: f64,
) -> Result<CgSolution> {
    let mut x = vec![0.0; g.len()];
    let mut r = g.to_vec();
    let mut p = g.to_vec();
    let mut rdotr = dot(&r, &r);
    let mut iterations = 0;
    for _ in 0..max_iters {
        if rdotr.sqrt() < tol {
            break;
        }
        let ap = apply(&p);
        let pap = dot(&p, &ap);
        if !pap.is_finite() || pap <= 0.0 {
            return Err(Error::Numerical(format!(
                "conjugate gradient met non-positive curvature {pap}"
            )));
        }
        let alpha = rdotr / pap;
        for (xi, pi) in x.iter_mut().zip(&p) {
            *xi += alpha * pi;
        }
        for (ri, api) in r.iter_mut().zip(&ap) {
            *ri -= alpha * api;
        }
        let rdotr_new = dot(&r, &r);
        let beta = rdotr_new / rdotr;
        for (pi, ri) in p.iter_mut().zip(&r) {
            *pi = ri + beta * *pi;
        }
        rdotr = rdotr_new;
        iterations += 1;
    }
    if !x.iter().all(|v| v.is_finite()) {
        return Err(Error::Numerical(
            "conjugate gradient produced non-finite solution".into(),
        ));
    }
    Ok(CgSolution {
        x,
        residual_norm: rdotr.sqrt(),
        iterations,
    })
}

/// Scales the curvature-adjusted direction `x = F⁻¹g` to the trust-region
/// boundary: `Δ = sqrt(2δ / gᵀx) · x`, so that `½ ΔᵀFΔ = δ` when the solve
/// is exact. A non-positive or non-finite `gᵀx` (zero gradient, curvature
/// breakdown) is reported as a degenerate step for the caller to skip.
pub fn natural_step(g: &[f64], x: &[f64], kl_delta: f64) -> Result<Vec<f64>> {
    let gx = dot(g, x);
    if !gx.is_finite() || gx <= 0.0 {
        return Err(Error::DegenerateStep(format!(
            "gradient–direction inner product {gx} admits no trust-region step"
        )));
    }
    let scale = (2.0 * kl_delta / gx).sqrt();
    Ok(x.iter().map(|v| scale * v).collect())
}

// ---------------------------------------------------------------------------
// Surrogate objective, KL, and the line search
// ---------------------------------------------------------------------------

/// Importance-ratio surrogate improvement and sampled mean KL of candidate
/// parameters against the batch's sampling distribution, in one pass:
///
/// * `L(θ') = (1/(M·N)) Σ_i γ^{d_i} (exp(log π_{θ'} − log π_θ) − 1) Â_i`,
///   exactly zero at `θ' = θ`;
/// * `KL = (1/(M·N)) Σ_i D_KL(π_{θ'}(·|s_i) ‖ π_θ(·|s_i))` between the
///   per-step Gaussian heads.
pub fn surrogate_and_mean_kl(
    policy: &PolicyNetwork,
    theta_new: &ParamVector,
    batch: &EpisodeBatch,
    advantages: &[f64],
    gamma: f64,
) -> Result<(f64, f64)> {
    batch.validate()?;
    let flat = batch.flat();
    if advantages.len() != flat.len() {
        return Err(Error::Shape(format!(
            "got {} advantages for {} batch steps",
            advantages.len(),
            flat.len()
        )));
    }
    let terms: Vec<(f64, f64)> = (0..flat.len())
        .into_par_iter()
        .map(|i| {
            let t = flat[i];
            let head = policy.forward_policy(theta_new, &t.state)?;
            let ratio_minus_one = (head.log_prob(&t.raw_action) - t.log_prob).exp() - 1.0;
            let l_term = gamma.powi(t.disc_exp as i32) * ratio_minus_one * advantages[i];
            let old = GaussianHead {
                mean: t.mean.clone(),
                log_std: t.log_std.clone(),
            };
            let kl_term = crate::neuralnet::kl_diag_gaussian(&head, &old);
            Ok((l_term, kl_term))
        })
        .collect::<Result<Vec<_>>>()?;
    let inv = 1.0 / terms.len() as f64;
    let (mut l, mut kl) = (0.0, 0.0);
    for (lt, kt) in terms {
        l += lt;
        kl += kt;
    }
    Ok((l * inv, kl * inv))
}

/// Surrogate improvement of `theta_new` over the batch's sampling
/// parameters (see [`surrogate_and_mean_kl`]).
pub fn surrogate_l(
    policy: &PolicyNetwork,
    theta_new: &ParamVector,
    batch: &EpisodeBatch,
    advantages: &[f64],
    gamma: f64,
) -> Result<f64> {
    surrogate_and_mean_kl(policy, theta_new, batch, advantages, gamma).map(|(l, _)| l)
}

/// Sampled mean KL divergence `KL(π_{θ'} ‖ π_θ)` over the batch's states,
/// with the sampling-time heads stored in the batch as the old policy.
pub fn mean_kl(
    policy: &PolicyNetwork,
    theta_new: &ParamVector,
    batch: &EpisodeBatch,
) -> Result<f64> {
    let advantages = vec![0.0; batch.num_steps()];
    surrogate_and_mean_kl(policy, theta_new, batch, &advantages, 1.0).map(|(_, kl)| kl)
}

/// Outcome of the backtracking line search.
#[derive(Debug, Clone)]
pub struct LineSearchOutcome {
    /// Accepted parameters; equal to the input parameters when rejected.
    pub theta: ParamVector,
    pub accepted: bool,
    /// Backtracking exponent of the accepted candidate; `max_backtracks`
    /// when every candidate was rejected.
    pub j_used: usize,
    /// Sampled mean KL of the accepted candidate (0 when rejected).
    pub kl: f64,
    /// Surrogate improvement of the accepted candidate (0 when rejected).
    pub surrogate: f64,
}

/// Backtracking line search over candidates `θ + ζ^j Δ` for
/// `j = 0, 1, …, max_backtracks`, accepting the first whose surrogate
/// improvement is non-negative **and** whose sampled mean KL is within the
/// trust region. If no candidate passes, the parameters are left unchanged.
pub fn line_search_update(
    policy: &PolicyNetwork,
    theta: &ParamVector,
    delta: &ParamVector,
    batch: &EpisodeBatch,
    advantages: &[f64],
    cfg: &TrpoConfig,
) -> Result<LineSearchOutcome> {
    for j in 0..=cfg.max_backtracks {
        let scale = cfg.step_zeta.powi(j as i32);
        let candidate = theta.add_scaled(delta, scale);
        let (l, kl) =
            surrogate_and_mean_kl(policy, &candidate, batch, advantages, cfg.discount_gamma)?;
        // A NaN in either statistic fails both comparisons and falls through
        // to the next backtrack.
        if l >= 0.0 && kl <= cfg.kl_delta {
            return Ok(LineSearchOutcome {
                theta: candidate,
                accepted: true,
                j_used: j,
                kl,
                surrogate: l,
            });
        }
    }
    Ok(LineSearchOutcome {
        theta: theta.clone(),
        accepted: false,
        j_used: cfg.max_backtracks,
        kl: 0.0,
        surrogate: 0.0,
    })
}

/// Fixed-step policy-gradient ascent `θ' = θ + α·g` with the same gradient
/// estimator as the trust-region path but no curvature correction, KL bound,
/// or backtracking.
pub fn a2c_update(
    policy: &PolicyNetwork,
    theta: &ParamVector,
    batch: &EpisodeBatch,
    advantages: &[f64],
    gamma: f64,
    step_size: f64,
) -> Result<ParamVector> {
    let g = policy_gradient_estimate(policy, theta, batch, advantages, gamma)?;
    Ok(theta.add_scaled(&g, step_size))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::neuralnet::sample_action;
    use crate::seeding::{stream, Stream};
    use approx::{assert_abs_diff_eq, assert_relative_eq};
    use num_complex::Complex64;
    use proptest::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn test_rng(tag: u64) -> ChaCha8Rng {
        stream(0x7270_6F21, Stream::Rollout, tag, 0)
    }

    /// Minimal one-cell, one-user placeholders for episodes built directly
    /// in tests rather than by a network rollout.
    fn dummy_channels() -> ChannelTensor {
        ChannelTensor::new(1, 1, vec![Complex64::new(0.0, 0.0)]).unwrap()
    }

    fn dummy_powers() -> PowerMatrix {
        PowerMatrix::zeros(1, 1)
    }

    /// Builds a transition with consistent bookkeeping from raw pieces.
    fn transition(
        state: Vec<f64>,
        raw: Vec<f64>,
        mean: Vec<f64>,
        log_std: Vec<f64>,
        reward: f64,
        disc_exp: u32,
        pmax: f64,
    ) -> Transition {
        let head = GaussianHead {
            mean: mean.clone(),
            log_std: log_std.clone(),
        };
        let power: Vec<f64> = raw.iter().map(|&a| a.clamp(0.0, pmax)).collect();
        Transition {
            power_frac: power.iter().map(|p| p / pmax).collect(),
            mean_frac: mean.iter().map(|m| m.clamp(0.0, pmax) / pmax).collect(),
            log_prob: head.log_prob(&raw),
            state,
            power,
            raw_action: raw,
            mean,
            log_std,
            reward,
            disc_exp,
        }
    }

    fn batch_of(episodes: Vec<Episode>, horizon: usize) -> EpisodeBatch {
        EpisodeBatch {
            episodes,
            scheme: SchemeTag::Centralized,
            horizon,
        }
    }

    /// Samples `m` one-step episodes from `policy` on a fixed scalar state,
    /// rewarding each episode by `reward(power)`.
    fn sample_stateless_batch(
        policy: &PolicyNetwork,
        theta: &ParamVector,
        m: usize,
        reward: impl Fn(&[f64]) -> f64,
        rng: &mut impl Rng,
    ) -> EpisodeBatch {
        let state = vec![1.0];
        let head = policy.forward_policy(theta, &state).unwrap();
        let episodes: Vec<Episode> = (0..m)
            .map(|_| {
                let s = sample_action(&head, rng, policy.pmax_watts());
                let r = reward(&s.power);
                let t = transition(
                    state.clone(),
                    s.raw.clone(),
                    head.mean.clone(),
                    head.log_std.clone(),
                    r,
                    0,
                    policy.pmax_watts(),
                );
                Episode {
                    steps: vec![t],
                    channels: dummy_channels(),
                    powers: dummy_powers(),
                    sum_rate_bps: r,
                }
            })
            .collect();
        batch_of(episodes, 1)
    }

    fn tiny_policy(pmax: f64) -> PolicyNetwork {
        PolicyNetwork::new(1, 1, &[4], pmax).unwrap()
    }

    /// Central finite difference of a scalar function of the parameters.
    fn fd_grad(f: impl Fn(&ParamVector) -> f64, at: &ParamVector, h: f64) -> Vec<f64> {
        let mut out = Vec::with_capacity(at.len());
        for i in 0..at.len() {
            let mut plus = at.clone();
            plus.values_mut()[i] += h;
            let mut minus = at.clone();
            minus.values_mut()[i] -= h;
            out.push((f(&plus) - f(&minus)) / (2.0 * h));
        }
        out
    }

    // -- returns ------------------------------------------------------------

    #[test]
    fn discounted_returns_match_hand_rolled_example() {
        let g = discounted_returns(&[0.0, 0.0, 10.0], 0.99);
        assert_abs_diff_eq!(g[0], 9.801, epsilon = 1e-12);
        assert_abs_diff_eq!(g[1], 9.9, epsilon = 1e-12);
        assert_abs_diff_eq!(g[2], 10.0, epsilon = 1e-12);
    }

    #[test]
    fn discounted_returns_gamma_zero_keeps_immediate_rewards() {
        let g = discounted_returns(&[1.0, 2.0, 3.0], 0.0);
        assert_eq!(g, vec![1.0, 2.0, 3.0]);
    }

    #[test]
    fn discounted_returns_gamma_one_gives_suffix_sums() {
        let g = discounted_returns(&[1.0, 2.0, 3.0], 1.0);
        assert_eq!(g, vec![6.0, 5.0, 3.0]);
    }

    #[test]
    fn batch_returns_are_episode_major() {
        let pmax = 2.0;
        let ep = |r1: f64, r2: f64| Episode {
            steps: vec![
                transition(vec![0.5], vec![0.1], vec![0.2], vec![0.0], r1, 0, pmax),
                transition(vec![0.5], vec![0.1], vec![0.2], vec![0.0], r2, 1, pmax),
            ],
            channels: dummy_channels(),
            powers: dummy_powers(),
            sum_rate_bps: r2,
        };
        let batch = batch_of(vec![ep(0.0, 10.0), ep(5.0, 0.0)], 2);
        let g = batch_returns(&batch, 0.5);
        assert_eq!(g, vec![5.0, 10.0, 5.0, 0.0]);
    }

    // -- advantages ----------------------------------------------------------

    /// A value network with all-zero parameters returns 0 everywhere, so the
    /// normalized advantages must be exactly the standardized returns, and
    /// they must not depend on the reward scale.
    #[test]
    fn zero_critic_advantages_are_standardized_returns() {
        let pmax = 2.0;
        let mut rng = test_rng(1);
        let episodes: Vec<Episode> = (0..6)
            .map(|i| {
                let r = 10.0 + 3.0 * i as f64 + rng.random::<f64>();
                Episode {
                    steps: vec![transition(
                        vec![0.3],
                        vec![0.4],
                        vec![0.5],
                        vec![0.1],
                        r,
                        0,
                        pmax,
                    )],
                    channels: dummy_channels(),
                    powers: dummy_powers(),
                    sum_rate_bps: r,
                }
            })
            .collect();
        let batch = batch_of(episodes, 1);
        let value = ValueNetwork::new(3, &[4]).unwrap();
        let phi = ParamVector::zeros(value.shape().clone());

        let adv = estimate_advantages(&value, &phi, &batch, 0.99, 1.0).unwrap();
        let returns = batch_returns(&batch, 0.99);
        let standardized = normalize_advantages(&returns);
        for (a, s) in adv.normalized.iter().zip(&standardized) {
            assert_abs_diff_eq!(a, s, epsilon = 1e-12);
        }

        let adv_scaled = estimate_advantages(&value, &phi, &batch, 0.99, 1e8).unwrap();
        for (a, b) in adv.normalized.iter().zip(&adv_scaled.normalized) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-9);
        }
    }

    /// On a deterministic task where every episode earns the same return, a
    /// critic that outputs exactly that return leaves zero raw advantage.
    #[test]
    fn perfect_critic_gives_zero_raw_advantages() {
        let pmax = 2.0;
        let reward = 7.25;
        let episodes: Vec<Episode> = (0..4)
            .map(|i| Episode {
                steps: vec![transition(
                    vec![i as f64],
                    vec![0.4],
                    vec![0.5],
                    vec![0.1],
                    reward,
                    0,
                    pmax,
                )],
                channels: dummy_channels(),
                powers: dummy_powers(),
                sum_rate_bps: reward,
            })
            .collect();
        let batch = batch_of(episodes, 1);
        // Input is (state, power fraction, log-std) = 3 features; a single
        // linear unit with zero weights and bias = reward is a perfect critic.
        let value = ValueNetwork::new(3, &[]).unwrap();
        let phi =
            ParamVector::from_values(value.shape().clone(), vec![0.0, 0.0, 0.0, reward]).unwrap();
        let adv = estimate_advantages(&value, &phi, &batch, 0.99, 1.0).unwrap();
        for a in &adv.raw {
            assert_abs_diff_eq!(*a, 0.0, epsilon = 1e-12);
        }
        // Degenerate spread: normalization only centers.
        for a in &adv.normalized {
            assert_abs_diff_eq!(*a, 0.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn normalized_advantages_have_zero_mean_unit_variance() {
        let raw: Vec<f64> = (0..37)
            .map(|i| (i as f64 * 0.713).sin() * 40.0 + 5.0)
            .collect();
        let normed = normalize_advantages(&raw);
        let n = normed.len() as f64;
        let mean = normed.iter().sum::<f64>() / n;
        let var = normed.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / n;
        assert_abs_diff_eq!(mean, 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(var, 1.0, epsilon = 1e-12);
    }

    // -- critic fitting -------------------------------------------------------

    fn constant_state_batch(m: usize, rng: &mut impl Rng) -> EpisodeBatch {
        let pmax = 2.0;
        let episodes: Vec<Episode> = (0..m)
            .map(|_| {
                let x: f64 = rng.random::<f64>() * 2.0 - 1.0;
                let r = 3.0 * x + 1.0;
                Episode {
                    steps: vec![transition(
                        vec![x],
                        vec![0.5],
                        vec![0.5],
                        vec![0.0],
                        r,
                        0,
                        pmax,
                    )],
                    channels: dummy_channels(),
                    powers: dummy_powers(),
                    sum_rate_bps: r,
                }
            })
            .collect();
        batch_of(episodes, 1)
    }

    #[test]
    fn critic_fit_reduces_loss() {
        let mut rng = test_rng(2);
        let batch = constant_state_batch(64, &mut rng);
        let returns = batch_returns(&batch, 0.99);
        let value = ValueNetwork::new(3, &[8]).unwrap();
        let mut init_rng = test_rng(3);
        let phi = value.init_params(&mut init_rng);

        let cfg = TrpoConfig {
            critic_epochs: 40,
            critic_lr: 5e-2,
            critic_minibatch: 16,
            ..TrpoConfig::default()
        };
        let mut scratch = vec![0.0; phi.len()];
        let mut initial_loss = 0.0;
        for t in batch.flat() {
            let input = critic_sample_input(t);
            initial_loss += value
                .squared_error_grad_into(&phi, &input, t.reward, 0.0, &mut scratch)
                .unwrap();
        }
        initial_loss /= batch.num_steps() as f64;

        let fit = fit_critic(&value, &phi, &batch, &returns, &cfg, 1.0, &mut rng).unwrap();
        assert!(
            fit.final_loss < 0.5 * initial_loss,
            "critic loss {:.6} did not drop from {:.6}",
            fit.final_loss,
            initial_loss
        );
    }

    #[test]
    fn critic_zero_learning_rate_keeps_parameters() {
        let mut rng = test_rng(4);
        let batch = constant_state_batch(16, &mut rng);
        let returns = batch_returns(&batch, 0.99);
        let value = ValueNetwork::new(3, &[8]).unwrap();
        let mut init_rng = test_rng(5);
        let phi = value.init_params(&mut init_rng);
        let cfg = TrpoConfig {
            critic_lr: 0.0,
            ..TrpoConfig::default()
        };
        let fit = fit_critic(&value, &phi, &batch, &returns, &cfg, 1.0, &mut rng).unwrap();
        assert_eq!(fit.phi.values(), phi.values());
    }

    /// One full-batch epoch on a single linear unit must match the textbook
    /// least-squares gradient step computed by hand.
    #[test]
    fn critic_linear_unit_matches_hand_gradient_step() {
        let pmax = 2.0;
        let xs = [0.5, -1.0, 2.0, 0.0];
        let rs = [1.0, -0.5, 3.0, 0.25];
        let episodes: Vec<Episode> = xs
            .iter()
            .zip(&rs)
            .map(|(&x, &r)| Episode {
                steps: vec![transition(
                    vec![x],
                    vec![0.6],
                    vec![0.6],
                    vec![0.2],
                    r,
                    0,
                    pmax,
                )],
                channels: dummy_channels(),
                powers: dummy_powers(),
                sum_rate_bps: r,
            })
            .collect();
        let batch = batch_of(episodes, 1);
        let returns = batch_returns(&batch, 0.99);

        let value = ValueNetwork::new(3, &[]).unwrap();
        let (w0, b0) = (0.3, -0.1);
        // Weights on (state, power fraction, log-std); only the first input
        // varies, the others contribute constant features.
        let phi = ParamVector::from_values(value.shape().clone(), vec![w0, 0.0, 0.0, b0]).unwrap();
        let lr = 0.05;
        let cfg = TrpoConfig {
            critic_lr: lr,
            critic_epochs: 1,
            critic_minibatch: xs.len(),
            ..TrpoConfig::default()
        };
        let mut rng = test_rng(6);
        let fit = fit_critic(&value, &phi, &batch, &returns, &cfg, 1.0, &mut rng).unwrap();

        // Hand-rolled step for v = w·x + c1·0.3 + c2·0.2 + b. Features 2 and 3
        // are the power fraction 0.6/2.0 = 0.3 and the log-std 0.2.
        let feats = [0.3f64, 0.2];
        let n = xs.len() as f64;
        let (mut gw, mut gc1, mut gc2, mut gb) = (0.0, 0.0, 0.0, 0.0);
        for (&x, &r) in xs.iter().zip(&rs) {
            let v = w0 * x + b0;
            let e = 2.0 * (v - r) / n;
            gw += e * x;
            gc1 += e * feats[0];
            gc2 += e * feats[1];
            gb += e;
        }
        let expect = [w0 - lr * gw, -lr * gc1, -lr * gc2, b0 - lr * gb];
        for (got, want) in fit.phi.values().iter().zip(&expect) {
            assert_abs_diff_eq!(got, want, epsilon = 1e-12);
        }
    }

    #[test]
    fn critic_divergent_learning_rate_reports_training_error() {
        let mut rng = test_rng(7);
        let batch = constant_state_batch(32, &mut rng);
        let returns = batch_returns(&batch, 0.99);
        let value = ValueNetwork::new(3, &[8]).unwrap();
        let mut init_rng = test_rng(8);
        let phi = value.init_params(&mut init_rng);
        let cfg = TrpoConfig {
            critic_lr: 1e14,
            critic_epochs: 8,
            ..TrpoConfig::default()
        };
        match fit_critic(&value, &phi, &batch, &returns, &cfg, 1.0, &mut rng) {
            Err(Error::Training(_)) => {}
            other => panic!("expected a training error, got {other:?}"),
        }
    }

    #[test]
    fn critic_fit_is_deterministic_for_equal_seeds() {
        let value = ValueNetwork::new(3, &[8]).unwrap();
        let cfg = TrpoConfig {
            critic_epochs: 3,
            ..TrpoConfig::default()
        };
        let run = || {
            let mut rng = test_rng(9);
            let batch = constant_state_batch(32, &mut rng);
            let returns = batch_returns(&batch, 0.99);
            let mut init_rng = test_rng(10);
            let phi = value.init_params(&mut init_rng);
            let mut fit_rng = test_rng(11);
            fit_critic(&value, &phi, &batch, &returns, &cfg, 1.0, &mut fit_rng).unwrap()
        };
        let (a, b) = (run(), run());
        assert_eq!(a.phi.values(), b.phi.values());
        assert_eq!(a.final_loss, b.final_loss);
    }

    // -- score table / policy gradient ---------------------------------------

    #[test]
    fn zero_advantages_give_zero_gradient() {
        let policy = tiny_policy(2.0);
        let mut rng = test_rng(12);
        let theta = policy.init_params(&mut rng);
        let batch = sample_stateless_batch(&policy, &theta, 10, |p| p[0], &mut rng);
        let g = policy_gradient_estimate(&policy, &theta, &batch, &vec![0.0; 10], 0.99).unwrap();
        assert!(g.values().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn single_sample_gradient_reduces_to_scaled_score() {
        let policy = tiny_policy(2.0);
        let mut rng = test_rng(13);
        let theta = policy.init_params(&mut rng);
        let batch = sample_stateless_batch(&policy, &theta, 1, |p| p[0], &mut rng);
        let adv = [1.7];
        let g = policy_gradient_estimate(&policy, &theta, &batch, &adv, 0.99).unwrap();
        let t = &batch.episodes[0].steps[0];
        let (_, score) = policy
            .log_prob_and_grad(&theta, &t.state, &t.raw_action)
            .unwrap();
        for (gi, si) in g.values().iter().zip(score.values()) {
            assert_abs_diff_eq!(*gi, 1.7 * si, epsilon = 1e-12);
        }
    }

    #[test]
    fn score_table_rows_match_direct_backprop() {
        let policy = tiny_policy(2.0);
        let mut rng = test_rng(14);
        let theta = policy.init_params(&mut rng);
        let batch = sample_stateless_batch(&policy, &theta, 5, |p| p[0], &mut rng);
        let table = ScoreTable::compute(&policy, &theta, &batch, 0.99).unwrap();
        for (i, t) in batch.flat().iter().enumerate() {
            let (_, score) = policy
                .log_prob_and_grad(&theta, &t.state, &t.raw_action)
                .unwrap();
            assert_eq!(table.row(i), score.values());
            assert_abs_diff_eq!(table.discount(i), 1.0, epsilon = 0.0);
        }
    }

    /// The gradient of the importance-ratio surrogate at the sampling
    /// parameters equals the policy-gradient estimate; check by central
    /// finite differences on every parameter.
    #[test]
    fn surrogate_finite_difference_matches_gradient_estimate() {
        let policy = tiny_policy(2.0);
        let mut rng = test_rng(15);
        let theta = policy.init_params(&mut rng);
        let batch =
            sample_stateless_batch(&policy, &theta, 12, |p| (1.0 + 4.0 * p[0]).log2(), &mut rng);
        let returns = batch_returns(&batch, 0.99);
        let adv = normalize_advantages(&returns);
        let g = policy_gradient_estimate(&policy, &theta, &batch, &adv, 0.99).unwrap();

        let fd = fd_grad(
            |th| surrogate_l(&policy, th, &batch, &adv, 0.99).unwrap(),
            &theta,
            1e-6,
        );
        let diff: f64 = fd
            .iter()
            .zip(g.values())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        let scale: f64 = g.values().iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!(
            diff <= 1e-3 * scale.max(1e-12),
            "finite-difference mismatch: ‖Δ‖ = {diff:.3e} vs ‖g‖ = {scale:.3e}"
        );
    }

    /// With the advantage of each sample held fixed (no batch-dependent
    /// normalization), doubling the number of sampled episodes must halve
    /// the variance of the gradient estimate.
    #[test]
    fn doubling_batch_size_halves_gradient_variance() {
        let policy = tiny_policy(2.0);
        let mut rng = test_rng(16);
        let theta = policy.init_params(&mut rng);
        let reward = |p: &[f64]| (1.0 + 4.0 * p[0]).log2();
        let fixed_adv = |batch: &EpisodeBatch| -> Vec<f64> {
            batch.flat().iter().map(|t| t.reward - 1.5).collect()
        };

        let mut variance_for = |m: usize| -> f64 {
            let reps = 50;
            let mut gs: Vec<Vec<f64>> = Vec::with_capacity(reps);
            for _ in 0..reps {
                let batch = sample_stateless_batch(&policy, &theta, m, reward, &mut rng);
                let adv = fixed_adv(&batch);
                gs.push(
                    policy_gradient_estimate(&policy, &theta, &batch, &adv, 0.99)
                        .unwrap()
                        .values()
                        .to_vec(),
                );
            }
            let dim = gs[0].len();
            let mut total = 0.0;
            for d in 0..dim {
                let mean = gs.iter().map(|g| g[d]).sum::<f64>() / reps as f64;
                total += gs
                    .iter()
                    .map(|g| (g[d] - mean) * (g[d] - mean))
                    .sum::<f64>()
                    / reps as f64;
            }
            total
        };

        let var_small = variance_for(40);
        let var_large = variance_for(80);
        let ratio = var_small / var_large;
        assert!(
            (1.4..=2.8).contains(&ratio),
            "variance ratio {ratio:.3} deviates from the expected halving"
        );
    }

    // -- Fisher-vector products ------------------------------------------------

    #[test]
    fn fisher_vector_product_of_zero_is_zero() {
        let policy = tiny_policy(2.0);
        let mut rng = test_rng(17);
        let theta = policy.init_params(&mut rng);
        let batch = sample_stateless_batch(&policy, &theta, 6, |p| p[0], &mut rng);
        let z = ParamVector::zeros(policy.shape().clone());
        let fv = fisher_vector_product(&policy, &theta, &batch, &z, 1e-2).unwrap();
        assert!(fv.values().iter().all(|&x| x == 0.0));
    }

    /// For a network small enough to build the score outer-product matrix
    /// explicitly, the matrix-free product must match `F̂v` entry for entry.
    #[test]
    fn fisher_vector_product_matches_explicit_matrix() {
        let policy = tiny_policy(2.0);
        let mut rng = test_rng(18);
        let theta = policy.init_params(&mut rng);
        let batch = sample_stateless_batch(&policy, &theta, 24, |p| p[0], &mut rng);
        let table = ScoreTable::compute(&policy, &theta, &batch, 0.99).unwrap();
        let p = policy.shape().param_count();
        assert!(
            p <= 200,
            "oracle intended for small parameter counts, got {p}"
        );
        let damping = 1e-2;

        let mut fisher = vec![vec![0.0; p]; p];
        for i in 0..table.len() {
            let row = table.row(i);
            for a in 0..p {
                for b in 0..p {
                    fisher[a][b] += row[a] * row[b] / table.len() as f64;
                }
            }
        }
        for a in 0..p {
            fisher[a][a] += damping;
        }

        let mut v = vec![0.0; p];
        for (i, vi) in v.iter_mut().enumerate() {
            *vi = ((i as f64) * 0.37).sin();
        }
        let fv = table.fisher_vector_product(&v, damping);
        for a in 0..p {
            let want: f64 = dot(&fisher[a], &v);
            assert_abs_diff_eq!(fv[a], want, epsilon = 1e-6);
        }
    }

    #[test]
    fn fisher_quadratic_form_is_at_least_damping() {
        let policy = tiny_policy(2.0);
        let mut rng = test_rng(19);
        let theta = policy.init_params(&mut rng);
        let batch = sample_stateless_batch(&policy, &theta, 16, |p| p[0], &mut rng);
        let table = ScoreTable::compute(&policy, &theta, &batch, 0.99).unwrap();
        let damping = 1e-2;
        let p = policy.shape().param_count();
        for k in 0..5 {
            let v: Vec<f64> = (0..p).map(|i| ((i + 7 * k) as f64 * 0.61).cos()).collect();
            let fv = table.fisher_vector_product(&v, damping);
            let quad = dot(&v, &fv);
            let norm2 = dot(&v, &v);
            assert!(
                quad >= damping * norm2 - 1e-12,
                "quadratic form {quad:.3e} below damping floor {:.3e}",
                damping * norm2
            );
        }
    }

    #[test]
    fn fisher_vector_product_is_linear_and_symmetric() {
        let policy = tiny_policy(2.0);
        let mut rng = test_rng(20);
        let theta = policy.init_params(&mut rng);
        let batch = sample_stateless_batch(&policy, &theta, 16, |p| p[0], &mut rng);
        let table = ScoreTable::compute(&policy, &theta, &batch, 0.99).unwrap();
        let p = policy.shape().param_count();
        let damping = 1e-2;
        let u: Vec<f64> = (0..p).map(|i| wave(i, 0.29)).collect();
        let v: Vec<f64> = (0..p).map(|i| wave(i, 0.53)).collect();

        let fu = table.fisher_vector_product(&u, damping);
        let fv = table.fisher_vector_product(&v, damping);
        // Symmetry: uᵀFv = vᵀFu.
        assert_abs_diff_eq!(dot(&u, &fv), dot(&v, &fu), epsilon = 1e-8);

        // Linearity: F(2u + 3v) = 2Fu + 3Fv.
        let w: Vec<f64> = u.iter().zip(&v).map(|(a, b)| 2.0 * a + 3.0 * b).collect();
        let fw = table.fisher_vector_product(&w, damping);
        for i in 0..p {
            assert_abs_diff_eq!(fw[i], 2.0 * fu[i] + 3.0 * fv[i], epsilon = 1e-8);
        }
    }

    fn wave(i: usize, c: f64) -> f64 {
        ((i as f64) * c).sin()
    }

    // -- conjugate gradient ------------------------------------------------------

    #[test]
    fn conjugate_gradient_on_identity_converges_in_one_iteration() {
        let g = [3.0, -1.0, 0.5];
        let sol = conjugate_gradient(|v| v.to_vec(), &g, 10, 1e-8).unwrap();
        assert_eq!(sol.iterations, 1);
        for (x, want) in sol.x.iter().zip(&g) {
            assert_abs_diff_eq!(x, want, epsilon = 1e-12);
        }
    }

    #[test]
    fn conjugate_gradient_inverts_diagonal_system() {
        let diag = [1.0, 2.0, 4.0];
        let apply = |v: &[f64]| v.iter().zip(&diag).map(|(x, d)| x * d).collect::<Vec<_>>();
        let sol = conjugate_gradient(apply, &[1.0, 1.0, 1.0], 10, 1e-8).unwrap();
        let want = [1.0, 0.5, 0.25];
        for (x, w) in sol.x.iter().zip(&want) {
            assert_abs_diff_eq!(x, w, epsilon = 1e-8);
        }
        assert!(sol.iterations <= 10);
    }

    #[test]
    fn conjugate_gradient_random_spd_system_reaches_small_residual() {
        // A = MᵀM + I is symmetric positive definite.
        let n = 5;
        let mut rng = test_rng(21);
        let m: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..n).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect())
            .collect();
        let mut a = vec![vec![0.0; n]; n];
        for i in 0..n {
            for j in 0..n {
                for k in 0..n {
                    a[i][j] += m[k][i] * m[k][j];
                }
            }
            a[i][i] += 1.0;
        }
        let apply = |v: &[f64]| a.iter().map(|row| dot(row, v)).collect::<Vec<_>>();
        let g: Vec<f64> = (0..n).map(|i| (i as f64 + 1.0) * 0.3).collect();
        let sol = conjugate_gradient(&apply, &g, 20, 1e-10).unwrap();
        let ax = apply(&sol.x);
        let res: f64 = ax
            .iter()
            .zip(&g)
            .map(|(l, r)| (l - r) * (l - r))
            .sum::<f64>()
            .sqrt();
        assert!(res < 1e-6, "residual {res:.3e} too large");
    }

    // -- natural step ---------------------------------------------------------

    #[test]
    fn natural_step_identity_curvature_example() {
        // With identity curvature the direction equals the gradient, and the
        // radius fixes the scale: sqrt(2·0.01/25)·(3,4).
        let g = [3.0, 4.0];
        let step = natural_step(&g, &g, 0.01).unwrap();
        let scale = (2.0 * 0.01 / 25.0f64).sqrt();
        assert_abs_diff_eq!(step[0], scale * 3.0, epsilon = 1e-15);
        assert_abs_diff_eq!(step[1], scale * 4.0, epsilon = 1e-15);
        assert_abs_diff_eq!(step[0], 0.08485, epsilon = 1e-5);
        assert_abs_diff_eq!(step[1], 0.11314, epsilon = 1e-5);
    }

    #[test]
    fn natural_step_zero_gradient_is_degenerate() {
        match natural_step(&[0.0, 0.0], &[0.0, 0.0], 0.01) {
            Err(Error::DegenerateStep(_)) => {}
            other => panic!("expected a degenerate-step error, got {other:?}"),
        }
    }

    /// When the solve is accurate, the returned step sits exactly on the
    /// trust-region boundary of the damped curvature: ½ ΔᵀFΔ = δ.
    #[test]
    fn natural_step_quadratic_form_equals_trust_radius() {
        let policy = tiny_policy(2.0);
        let mut rng = test_rng(22);
        let theta = policy.init_params(&mut rng);
        let batch =
            sample_stateless_batch(&policy, &theta, 48, |p| (1.0 + 4.0 * p[0]).log2(), &mut rng);
        let returns = batch_returns(&batch, 0.99);
        let adv = normalize_advantages(&returns);
        let table = ScoreTable::compute(&policy, &theta, &batch, 0.99).unwrap();
        let g = table.policy_gradient(&adv).unwrap();
        let damping = 1e-2;
        let sol = conjugate_gradient(
            |v| table.fisher_vector_product(v, damping),
            g.values(),
            200,
            1e-10,
        )
        .unwrap();
        assert!(
            sol.residual_norm < 1e-8,
            "solve not accurate enough for the oracle"
        );
        let delta = 0.01;
        let step = natural_step(g.values(), &sol.x, delta).unwrap();
        let f_step = table.fisher_vector_product(&step, damping);
        let quad = 0.5 * dot(&step, &f_step);
        assert_abs_diff_eq!(quad, delta, epsilon = 1e-6);
    }

    // -- surrogate and KL --------------------------------------------------------

    #[test]
    fn surrogate_is_zero_at_sampling_parameters() {
        let policy = tiny_policy(2.0);
        let mut rng = test_rng(23);
        let theta = policy.init_params(&mut rng);
        let batch = sample_stateless_batch(&policy, &theta, 20, |p| p[0], &mut rng);
        let returns = batch_returns(&batch, 0.99);
        let adv = normalize_advantages(&returns);
        let l = surrogate_l(&policy, &theta, &batch, &adv, 0.99).unwrap();
        assert!(
            l.abs() <= 1e-10,
            "surrogate at the sampling parameters is {l:.3e}"
        );
    }

    #[test]
    fn mean_kl_is_zero_at_sampling_parameters() {
        let policy = tiny_policy(2.0);
        let mut rng = test_rng(24);
        let theta = policy.init_params(&mut rng);
        let batch = sample_stateless_batch(&policy, &theta, 20, |p| p[0], &mut rng);
        let kl = mean_kl(&policy, &theta, &batch).unwrap();
        assert_abs_diff_eq!(kl, 0.0, epsilon = 1e-12);
    }

    /// Over small random parameter perturbations, the sampled surrogate must
    /// rank candidates the same way as the true (analytic) objective of a
    /// stateless Gaussian task: positive rank correlation.
    #[test]
    fn surrogate_ranks_candidates_like_true_objective() {
        // Reward −(a − 1)² with no clamping influence (huge power budget):
        // the true objective of a Gaussian policy is −((μ−1)² + σ²).
        let policy = tiny_policy(1e9);
        let mut rng = test_rng(25);
        let theta = policy.init_params(&mut rng);
        let batch = sample_stateless_batch(
            &policy,
            &theta,
            600,
            |p| -(p[0] - 1.0) * (p[0] - 1.0),
            &mut rng,
        );
        let returns = batch_returns(&batch, 0.99);
        let adv = normalize_advantages(&returns);
        let state = [1.0];

        let true_objective = |th: &ParamVector| -> f64 {
            let head = policy.forward_policy(th, &state).unwrap();
            let (mu, sigma) = (head.mean[0], head.log_std[0].exp());
            -((mu - 1.0) * (mu - 1.0) + sigma * sigma)
        };

        let base_true = true_objective(&theta);
        let mut surrogate_scores = Vec::new();
        let mut true_gains = Vec::new();
        for k in 0..20 {
            let mut dir = ParamVector::zeros(policy.shape().clone());
            for (i, v) in dir.values_mut().iter_mut().enumerate() {
                *v = ((i * 31 + k * 17) as f64 * 0.77).sin();
            }
            let norm = dir.norm();
            let cand = theta.add_scaled(&dir, 0.05 / norm);
            surrogate_scores.push(surrogate_l(&policy, &cand, &batch, &adv, 0.99).unwrap());
            true_gains.push(true_objective(&cand) - base_true);
        }
        let rho = spearman(&surrogate_scores, &true_gains);
        assert!(rho > 0.0, "rank correlation {rho:.3} not positive");
    }

    fn ranks(xs: &[f64]) -> Vec<f64> {
        let mut idx: Vec<usize> = (0..xs.len()).collect();
        idx.sort_by(|&a, &b| xs[a].partial_cmp(&xs[b]).unwrap());
        let mut out = vec![0.0; xs.len()];
        for (rank, &i) in idx.iter().enumerate() {
            out[i] = rank as f64;
        }
        out
    }

    fn spearman(a: &[f64], b: &[f64]) -> f64 {
        let (ra, rb) = (ranks(a), ranks(b));
        let n = ra.len() as f64;
        let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
        let cov: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - ma) * (y - mb)).sum();
        let va: f64 = ra.iter().map(|x| (x - ma) * (x - ma)).sum();
        let vb: f64 = rb.iter().map(|y| (y - mb) * (y - mb)).sum();
        cov / (va.sqrt() * vb.sqrt())
    }

    /// The sampled mean KL behaves quadratically in the step: KL(θ, θ+tΔ)/t²
    /// approaches ½ ΔᵀF̂Δ with the (undamped) score outer-product curvature,
    /// up to the Monte-Carlo error of F̂.
    #[test]
    fn mean_kl_grows_quadratically_with_fisher_curvature() {
        let policy = tiny_policy(2.0);
        let mut rng = test_rng(26);
        let theta = policy.init_params(&mut rng);
        let batch = sample_stateless_batch(&policy, &theta, 4000, |p| p[0], &mut rng);
        let table = ScoreTable::compute(&policy, &theta, &batch, 1.0).unwrap();

        let p = policy.shape().param_count();
        let dir: Vec<f64> = (0..p).map(|i| ((i as f64) * 0.83).sin()).collect();
        let norm = dot(&dir, &dir).sqrt();
        let dir: Vec<f64> = dir.iter().map(|v| v / norm).collect();

        let f_dir = table.fisher_vector_product(&dir, 0.0);
        let quad = 0.5 * dot(&dir, &f_dir);

        let t = 1e-3;
        let delta_pv = ParamVector::from_values(policy.shape().clone(), dir.clone()).unwrap();
        let cand = theta.add_scaled(&delta_pv, t);
        let kl = mean_kl(&policy, &cand, &batch).unwrap();
        let ratio = kl / (t * t);
        assert_relative_eq!(ratio, quad, max_relative = 0.05);
    }

    // -- line search ---------------------------------------------------------

    #[test]
    fn line_search_accepts_small_ascent_step_immediately() {
        let policy = tiny_policy(2.0);
        let mut rng = test_rng(27);
        let theta = policy.init_params(&mut rng);
        let batch =
            sample_stateless_batch(&policy, &theta, 40, |p| (1.0 + 4.0 * p[0]).log2(), &mut rng);
        let returns = batch_returns(&batch, 0.99);
        let adv = normalize_advantages(&returns);
        let g = policy_gradient_estimate(&policy, &theta, &batch, &adv, 0.99).unwrap();
        // A short step along the gradient: surrogate gain ≈ ε‖g‖² > 0 and
        // KL = O(ε²) far inside the trust region.
        let scale = 1e-4 / g.norm();
        let delta = ParamVector::from_values(
            policy.shape().clone(),
            g.values().iter().map(|v| scale * v).collect(),
        )
        .unwrap();
        let cfg = TrpoConfig::default();
        let out = line_search_update(&policy, &theta, &delta, &batch, &adv, &cfg).unwrap();
        assert!(out.accepted);
        assert_eq!(out.j_used, 0);
        assert!(out.surrogate >= 0.0);
        assert!(out.kl <= cfg.kl_delta);
        let expect = theta.add_scaled(&delta, 1.0);
        assert_eq!(out.theta.values(), expect.values());
    }

    #[test]
    fn line_search_rejects_explosive_step_and_keeps_parameters() {
        let policy = tiny_policy(2.0);
        let mut rng = test_rng(28);
        let theta = policy.init_params(&mut rng);
        let batch =
            sample_stateless_batch(&policy, &theta, 40, |p| (1.0 + 4.0 * p[0]).log2(), &mut rng);
        let returns = batch_returns(&batch, 0.99);
        let adv = normalize_advantages(&returns);
        let g = policy_gradient_estimate(&policy, &theta, &batch, &adv, 0.99).unwrap();
        let table = ScoreTable::compute(&policy, &theta, &batch, 0.99).unwrap();
        let sol = conjugate_gradient(
            |v| table.fisher_vector_product(v, 1e-2),
            g.values(),
            10,
            1e-8,
        )
        .unwrap();
        let step = natural_step(g.values(), &sol.x, 0.01).unwrap();
        let huge = ParamVector::from_values(
            policy.shape().clone(),
            step.iter().map(|v| v * 1e6).collect(),
        )
        .unwrap();
        let cfg = TrpoConfig::default();
        let out = line_search_update(&policy, &theta, &huge, &batch, &adv, &cfg).unwrap();
        assert!(!out.accepted);
        assert_eq!(out.j_used, cfg.max_backtracks);
        assert_eq!(out.theta.values(), theta.values());
    }

    // -- fixed-step variant ------------------------------------------------------

    #[test]
    fn fixed_step_zero_size_is_identity() {
        let policy = tiny_policy(2.0);
        let mut rng = test_rng(29);
        let theta = policy.init_params(&mut rng);
        let batch = sample_stateless_batch(&policy, &theta, 10, |p| p[0], &mut rng);
        let returns = batch_returns(&batch, 0.99);
        let adv = normalize_advantages(&returns);
        let theta2 = a2c_update(&policy, &theta, &batch, &adv, 0.99, 0.0).unwrap();
        assert_eq!(theta2.values(), theta.values());
    }

    #[test]
    fn fixed_step_moves_exactly_along_gradient_estimate() {
        let policy = tiny_policy(2.0);
        let mut rng = test_rng(30);
        let theta = policy.init_params(&mut rng);
        let batch = sample_stateless_batch(&policy, &theta, 10, |p| p[0], &mut rng);
        let returns = batch_returns(&batch, 0.99);
        let adv = normalize_advantages(&returns);
        let g = policy_gradient_estimate(&policy, &theta, &batch, &adv, 0.99).unwrap();
        let step = 7e-4;
        let theta2 = a2c_update(&policy, &theta, &batch, &adv, 0.99, step).unwrap();
        for ((new, old), gi) in theta2.values().iter().zip(theta.values()).zip(g.values()) {
            assert_abs_diff_eq!(new - old, step * gi, epsilon = 1e-15);
        }
    }

    /// On the stateless task, iterate both update rules to a comparable
    /// reward level and compare late-stage stability: the fixed-step rule
    /// fluctuates more from iteration to iteration than the trust-region
    /// rule under the same sampling seeds. The reward peaks strictly inside
    /// the feasible power range so neither rule can park at a clamp.
    #[test]
    fn trust_region_updates_are_steadier_than_fixed_step_late_in_training() {
        let pmax = 2.0;
        let reward = |p: &[f64]| -(p[0] - 1.2) * (p[0] - 1.2);
        let iters = 160;
        let m = 32;

        let run = |rule: UpdateRule, step_size: f64| -> Vec<f64> {
            let policy = tiny_policy(pmax);
            let mut init_rng = stream(0xAB, Stream::PolicyInit, 0, 0);
            let mut theta = policy.init_params(&mut init_rng);
            let value = ValueNetwork::new(3, &[8]).unwrap();
            let mut vinit_rng = stream(0xAB, Stream::ValueInit, 0, 0);
            let mut phi = value.init_params(&mut vinit_rng);
            let cfg = TrpoConfig {
                episodes_per_iter: m,
                updater: rule,
                fixed_step_size: step_size,
                critic_epochs: 3,
                critic_lr: 1e-2,
                ..TrpoConfig::default()
            };
            let mut curve = Vec::with_capacity(iters);
            for it in 0..iters {
                let mut roll_rng = stream(0xAB, Stream::Rollout, it as u64, 0);
                let batch = sample_stateless_batch(&policy, &theta, m, reward, &mut roll_rng);
                curve.push(batch.episodes.iter().map(|e| e.total_reward()).sum::<f64>() / m as f64);
                let returns = batch_returns(&batch, cfg.discount_gamma);
                let adv =
                    estimate_advantages(&value, &phi, &batch, cfg.discount_gamma, 1.0).unwrap();
                let mut crit_rng = stream(0xAB, Stream::CriticShuffle, it as u64, 0);
                phi = fit_critic(&value, &phi, &batch, &returns, &cfg, 1.0, &mut crit_rng)
                    .unwrap()
                    .phi;
                match rule {
                    UpdateRule::FixedStep => {
                        theta = a2c_update(
                            &policy,
                            &theta,
                            &batch,
                            &adv.normalized,
                            cfg.discount_gamma,
                            step_size,
                        )
                        .unwrap();
                    }
                    UpdateRule::TrustRegion => {
                        let table =
                            ScoreTable::compute(&policy, &theta, &batch, cfg.discount_gamma)
                                .unwrap();
                        let g = table.policy_gradient(&adv.normalized).unwrap();
                        let sol = conjugate_gradient(
                            |v| table.fisher_vector_product(v, cfg.fisher_damping),
                            g.values(),
                            cfg.cg_iters,
                            cfg.cg_tol,
                        )
                        .unwrap();
                        if let Ok(step) = natural_step(g.values(), &sol.x, cfg.kl_delta) {
                            let delta =
                                ParamVector::from_values(policy.shape().clone(), step).unwrap();
                            theta = line_search_update(
                                &policy,
                                &theta,
                                &delta,
                                &batch,
                                &adv.normalized,
                                &cfg,
                            )
                            .unwrap()
                            .theta;
                        }
                    }
                }
            }
            curve
        };

        let trpo_curve = run(UpdateRule::TrustRegion, 7e-4);
        let a2c_curve = run(UpdateRule::FixedStep, 1e-3);

        fn late(c: &[f64]) -> &[f64] {
            &c[c.len() - 50..]
        }
        let step_var = |c: &[f64]| {
            let diffs: Vec<f64> = c.windows(2).map(|w| w[1] - w[0]).collect();
            let mean = diffs.iter().sum::<f64>() / diffs.len() as f64;
            diffs.iter().map(|d| (d - mean) * (d - mean)).sum::<f64>() / diffs.len() as f64
        };
        let trpo_var = step_var(late(&trpo_curve));
        let a2c_var = step_var(late(&a2c_curve));
        let trpo_mean = late(&trpo_curve).iter().sum::<f64>() / 50.0;
        let a2c_mean = late(&a2c_curve).iter().sum::<f64>() / 50.0;
        assert!(
            a2c_var > trpo_var,
            "expected fixed-step late variance {a2c_var:.4e} to exceed trust-region {trpo_var:.4e} \
             (means {a2c_mean:.3} vs {trpo_mean:.3})"
        );
    }

    // -- batch and config validation -----------------------------------------

    #[test]
    fn batch_validation_rejects_horizon_mismatch_and_bad_exponents() {
        let pmax = 2.0;
        let t0 = transition(vec![0.1], vec![0.2], vec![0.3], vec![0.0], 1.0, 0, pmax);
        let ep = Episode {
            steps: vec![t0.clone()],
            channels: dummy_channels(),
            powers: dummy_powers(),
            sum_rate_bps: 1.0,
        };
        let batch = EpisodeBatch {
            episodes: vec![ep.clone()],
            scheme: SchemeTag::Centralized,
            horizon: 2,
        };
        assert!(batch.validate().is_err());

        let mut bad = t0;
        bad.disc_exp = 5;
        let ep_bad = Episode {
            steps: vec![bad],
            channels: dummy_channels(),
            powers: dummy_powers(),
            sum_rate_bps: 1.0,
        };
        let batch = EpisodeBatch {
            episodes: vec![ep_bad],
            scheme: SchemeTag::Centralized,
            horizon: 1,
        };
        assert!(batch.validate().is_err());

        let empty = EpisodeBatch {
            episodes: vec![],
            scheme: SchemeTag::Centralized,
            horizon: 1,
        };
        assert!(empty.validate().is_err());
    }

    #[test]
    fn config_validation_rejects_out_of_range_values() {
        let ok = TrpoConfig::default();
        assert!(ok.validate().is_ok());
        assert!(TrpoConfig {
            kl_delta: 0.0,
            ..ok.clone()
        }
        .validate()
        .is_err());
        assert!(TrpoConfig {
            step_zeta: 1.0,
            ..ok.clone()
        }
        .validate()
        .is_err());
        assert!(TrpoConfig {
            discount_gamma: 1.5,
            ..ok.clone()
        }
        .validate()
        .is_err());
        assert!(TrpoConfig {
            episodes_per_iter: 0,
            ..ok.clone()
        }
        .validate()
        .is_err());
        assert!(TrpoConfig {
            fisher_damping: -1.0,
            ..ok.clone()
        }
        .validate()
        .is_err());
        assert!(TrpoConfig { cg_iters: 0, ..ok }.validate().is_err());
    }

    // -- properties -----------------------------------------------------------

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        /// The returns obey the backward recurrence G_n = r_n + γ·G_{n+1}.
        #[test]
        fn returns_satisfy_backward_recurrence(
            rewards in proptest::collection::vec(-100.0f64..100.0, 1..20),
            gamma in 0.0f64..=1.0,
        ) {
            let g = discounted_returns(&rewards, gamma);
            for n in 0..rewards.len() {
                let next = if n + 1 < rewards.len() { g[n + 1] } else { 0.0 };
                prop_assert!((g[n] - (rewards[n] + gamma * next)).abs() <= 1e-9);
            }
        }

        /// Normalization always yields zero mean, and unit variance whenever
        /// the inputs are not degenerate.
        #[test]
        fn normalization_is_centered_and_scaled(
            raw in proptest::collection::vec(-1e6f64..1e6, 2..64),
        ) {
            let normed = normalize_advantages(&raw);
            let n = normed.len() as f64;
            let mean = normed.iter().sum::<f64>() / n;
            prop_assert!(mean.abs() <= 1e-6);
            let spread = raw.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
                - raw.iter().cloned().fold(f64::INFINITY, f64::min);
            if spread > 1e-6 {
                let var = normed.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / n;
                prop_assert!((var - 1.0).abs() <= 1e-6);
            }
        }
    }
}
