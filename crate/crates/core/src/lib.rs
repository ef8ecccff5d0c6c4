//! Slotted-time uplink simulator with per-UE Age-of-Information (AoI)
//! tracking, and a family of bandwidth schedulers: round-robin,
//! proportional-fair, an exhaustive one-slot oracle, uniform random, and a
//! PPO actor-critic agent trained from scratch.
//!
//! Module map:
//! - [`sim`]: the environment (arrivals, FCFS service, AoI recursion, reward).
//! - [`traffic`]: seeded per-UE packet arrival processes.
//! - [`schedulers`]: non-learning policies behind [`schedulers::Scheduler`].
//! - [`nn`]: dense tanh networks with exact backpropagation and Adam.
//! - [`ppo`]: observation, action distribution, GAE, clipped updates, training.
//! - [`harness`]: experiment config, episodes, sweeps, CSV output, CLI.
//! - [`reference`]: straight-line AoI reference simulator used for cross-checks.

pub mod error;
pub mod harness;
pub mod nn;
pub mod ppo;
pub mod reference;
pub mod schedulers;
pub mod sim;
pub mod traffic;

pub use error::{Error, Result};
pub use schedulers::Scheduler;
pub use sim::{Environment, Schedule, SimConfig, StepResult};
pub use traffic::{ArrivalKind, ArrivalSpec};

/// Generator used for every stochastic component. ChaCha keeps streams
/// stable across platforms and `rand` releases.
pub type SimRng = rand_chacha::ChaCha8Rng;

/// Deterministically derives a child seed from a parent seed and a stream
/// index (SplitMix64 finalizer).
pub fn derive_seed(parent: u64, stream: u64) -> u64 {
    let mut z = parent
        .wrapping_add(stream.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
