//! Repeated one-step continuous bandit.
//!
//! The state is a context `c ∈ [−1, 1]`, redrawn uniformly after every pull
//! independently of the action, so each decision is a bandit but values
//! still bootstrap through the discount. With the edge `κ(c) = 0.5 + 0.2c`:
//!
//! ```text
//! r(c, a) = −1                                                   if a > κ(c)
//!         = max(0, 1 − 2(κ(c) − a), 0.6·exp(−(a + 0.5)²/0.02))   otherwise
//! ```
//!
//! The best action sits right at the cliff edge, with a second, lower mode
//! around `a = −0.5`. Episodes are [`HORIZON`] pulls and never terminate.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng as _;

use super::Step;
use crate::rng::{normal, Rng};

pub const HORIZON: usize = 10;

#[inline]
pub fn edge(c: f64) -> f64 {
    0.5 + 0.2 * c
}

pub fn reward(c: f64, a: f64) -> f64 {
    let k = edge(c);
    if a > k {
        return -1.0;
    }
    let ramp = 1.0 - 2.0 * (k - a);
    let bump = 0.6 * libm::exp(-(a + 0.5) * (a + 0.5) / 0.02);
    ramp.max(bump).max(0.0)
}

pub fn reset(rng: &mut Rng) -> Vec<f64> {
    vec![rng.random_range(-1.0..1.0)]
}

pub fn step(s: &[f64], a: &[f64], rng: &mut Rng) -> Step {
    Step { next_state: reset(rng), reward: reward(s[0], a[0]), done: false }
}

/// Just inside the edge.
pub fn expert(s: &[f64]) -> Vec<f64> {
    vec![edge(s[0]) - 0.01]
}

/// Keeps a safety margin of at least 0.15 below the edge.
pub fn medium(s: &[f64], rng: &mut Rng) -> Vec<f64> {
    vec![(edge(s[0]) - 0.15 - (0.1 * normal(rng)).abs()).clamp(-1.0, 1.0)]
}
