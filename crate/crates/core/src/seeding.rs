//! Deterministic derivation of independent random streams.
//!
//! Every stochastic component draws from its own ChaCha stream derived from
//! `(master seed, purpose, index a, index b)`. Distinct tuples map to distinct
//! 256-bit seeds, so streams never collide and results do not depend on how
//! work is scheduled across threads: an episode rollout, for example, owns the
//! stream `(master, Rollout, iteration, episode)` no matter which worker runs
//! it.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Purpose tag separating the random streams derived from one master seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum Stream {
    /// Policy-network weight initialization.
    PolicyInit = 1,
    /// Value-network weight initialization.
    ValueInit = 2,
    /// Channel presampling for input-normalization constants.
    Normalization = 3,
    /// Episode rollout `(iteration, episode)`.
    Rollout = 4,
    /// Mini-batch shuffling during critic fits `(iteration, epoch)`.
    CriticShuffle = 5,
    /// Shared evaluation channel realization `(realization, _)`.
    EvalChannel = 6,
    /// Action sampling during evaluation `(realization, method)`.
    EvalAction = 7,
    /// Per-seed-index run seeds within a campaign `(seed index, _)`.
    CampaignSeed = 8,
}

/// Returns the RNG for stream `(master, purpose, a, b)`.
pub fn stream(master: u64, purpose: Stream, a: u64, b: u64) -> ChaCha8Rng {
    let mut seed = [0u8; 32];
    seed[0..8].copy_from_slice(&master.to_le_bytes());
    seed[8] = purpose as u8;
    seed[16..24].copy_from_slice(&a.to_le_bytes());
    seed[24..32].copy_from_slice(&b.to_le_bytes());
    ChaCha8Rng::from_seed(seed)
}

/// Derives the master seed for the `index`-th run of a multi-seed campaign.
pub fn campaign_run_seed(master: u64, index: u64) -> u64 {
    use rand::Rng;
    stream(master, Stream::CampaignSeed, index, 0).random()
}
