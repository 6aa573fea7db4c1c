//! Damped double integrator regulated to the origin.
//!
//! State `(px, py, vx, vy)`, force `a ∈ [−1, 1]²`:
//!
//! ```text
//! v' = v + DT·(a − FRICTION·v)
//! p' = p + DT·v'
//! r  = −‖p'‖² − 0.01·‖a‖²
//! ```
//!
//! Episodes never terminate early; they are cut at [`HORIZON`].

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng as _;

use super::Step;
use crate::rng::{normal, Rng};

pub const DT: f64 = 0.1;
pub const FRICTION: f64 = 0.5;
pub const HORIZON: usize = 100;
pub const ACTION_COST: f64 = 0.01;

pub fn reset(rng: &mut Rng) -> Vec<f64> {
    vec![rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), 0.0, 0.0]
}

pub fn step(s: &[f64], a: &[f64]) -> Step {
    let mut next = vec![0.0; 4];
    for i in 0..2 {
        let v = s[2 + i] + DT * (a[i] - FRICTION * s[2 + i]);
        next[2 + i] = v;
        next[i] = s[i] + DT * v;
    }
    let reward = -(next[0] * next[0] + next[1] * next[1]) - ACTION_COST * (a[0] * a[0] + a[1] * a[1]);
    Step { next_state: next, reward, done: false }
}

/// PD controller.
pub fn expert(s: &[f64]) -> Vec<f64> {
    (0..2).map(|i| (-3.0 * s[i] - 2.5 * s[2 + i]).clamp(-1.0, 1.0)).collect()
}

/// Softer PD controller with action noise.
pub fn medium(s: &[f64], rng: &mut Rng) -> Vec<f64> {
    (0..2)
        .map(|i| (-0.2 * s[i] - 0.1 * s[2 + i] + 0.6 * normal(rng)).clamp(-1.0, 1.0))
        .collect()
}
