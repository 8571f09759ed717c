//! Multi-dimensional autoscaling for edge stream processing services.
//!
//! Services are scaled either in resources (cores) or in quality (pixel) to
//! maximize fuzzy SLO fulfillment. A local agent per service learns a linear
//! Gaussian model of its throughput, trains a Q-network against that model
//! and acts on a simulated device; a global optimizer swaps cores between
//! services once the device has no free cores left.
//!
//! The crate is `no_std` and only needs `alloc`. File formats, configuration
//! parsing and the command line live in the `mdscale` crate.

#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod agents;
pub mod dqn;
pub mod env;
pub mod harness;
pub mod lgbn;
pub mod sim;
pub mod slo;

/// Generator used for every stochastic component.
pub type SimRng = rand_chacha::ChaCha8Rng;

pub fn seeded_rng(seed: u64) -> SimRng {
    use rand::SeedableRng;
    SimRng::seed_from_u64(seed)
}
