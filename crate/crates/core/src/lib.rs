//! Downlink transmit-power control for multi-cell wireless networks.
//!
//! The crate bundles four layers:
//!
//! * [`netmodel`] — cell geometry, Rayleigh-fading channels, SINR / sum-rate
//!   evaluation, and power-feasibility projections;
//! * [`neuralnet`] + [`trpo`] — a from-scratch MLP policy/value pair and the
//!   trust-region policy-optimization machinery (natural gradient via
//!   conjugate-gradient Fisher-vector products, KL-bounded line search), plus
//!   a fixed-step actor-critic updater for comparison;
//! * [`agents`] — the three power-control schemes (centralized, partially
//!   decentralized, fully decentralized), their state encodings, rollouts,
//!   training, and evaluation;
//! * [`baselines`] + [`harness`] — classical solvers (WMMSE, fractional
//!   programming, max-power, random) and the reproducible experiment harness
//!   behind the `cellpower` CLI.
//!
//! All randomness flows through the stream derivation in [`seeding`], so any
//! run is a pure function of its configuration and master seed.

pub mod agents;
pub mod baselines;
pub mod error;
pub mod harness;
pub mod netmodel;
pub mod neuralnet;
pub mod seeding;
pub mod trpo;

pub use error::{Error, Result};
