//! Strategically conservative Q-learning (SCQ) for offline reinforcement learning.
//!
//! This crate is `no_std` (with `alloc`) and holds every algorithmic piece of the
//! laboratory:
//!
//! - [`linear`]: the exact finite-support linear-MDP analysis (true Q solves,
//!   LSTD-Q projection, closed-form CQL/SCQ updates and the pessimism verifiers).
//! - [`nn`]: small MLPs with hand-written reverse-mode gradients, layer norm,
//!   the squashed Gaussian policy head, Adam, Polyak averaging and LR schedules.
//! - [`cvae`]: the conditional VAE used as an out-of-distribution action detector.
//! - [`env`]: toy continuous-control environments, scripted controllers and
//!   offline dataset generation.
//! - [`agent`] and [`baselines`]: the SCQ training loop and its CQL / SAC(α=0) /
//!   layer-norm ablations.
//!
//! File formats, experiment orchestration and the CLI live in the `scq-lab` crate.
#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod agent;
pub mod baselines;
pub mod cvae;
pub mod env;
pub mod linalg;
pub mod linear;
pub mod nn;
pub mod rng;
pub mod stats;

pub use linalg::Matrix;
