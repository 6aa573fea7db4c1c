//! 2-D point mass in a U-shaped maze on `[0, 3]²`.
//!
//! The arena is a 3×3 grid of unit cells (index `row·3 + col`). The left two
//! cells of the middle row are solid, so the route from the start cell
//! (bottom-left) to the goal cell (top-left) runs around the right side.
//! Actions are velocities in `[−1, 1]²`; one step moves the point by
//! `DT·a`. A move that would cross the wall or leave the arena falls back
//! to its x-only, then y-only component, and otherwise stays put. Entering
//! the goal cell gives reward 1 and ends the episode. Commanding a speed
//! above [`SPEED_LIMIT`] spins the point out: the episode ends with reward 0.
//! The scripted controllers cruise at no more than [`CRUISE`], so only
//! corner actions of the box are dangerous.

use alloc::collections::VecDeque;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng as _;

use super::{round32, Step};
use crate::rng::{normal, Rng};

pub const DT: f64 = 0.2;
pub const HORIZON: usize = 100;
pub const SIZE: f64 = 3.0;
pub const START_CELL: usize = 0;
pub const GOAL_CELL: usize = 6;
pub const BLOCKED: [usize; 2] = [3, 4];
/// Solid region `[0, 2] × [1, 2]`.
pub const WALL: [f64; 4] = [0.0, 2.0, 1.0, 2.0];
const GAIN: f64 = 2.5;
/// Largest safe commanded speed (Euclidean norm of the action).
pub const SPEED_LIMIT: f64 = 1.0;
/// Speed cap of the scripted controllers.
pub const CRUISE: f64 = 0.8;
pub const MEDIUM_NOISE: f64 = 0.5;

pub fn cell_of(p: &[f64]) -> usize {
    let col = (p[0].clamp(0.0, SIZE - 1e-9)) as usize;
    let row = (p[1].clamp(0.0, SIZE - 1e-9)) as usize;
    row * 3 + col
}

pub fn cell_center(cell: usize) -> [f64; 2] {
    [(cell % 3) as f64 + 0.5, (cell / 3) as f64 + 0.5]
}

pub fn in_goal(p: &[f64]) -> bool {
    (0.0..=1.0).contains(&p[0]) && (2.0..=3.0).contains(&p[1])
}

fn strictly_inside_wall(p: &[f64]) -> bool {
    p[0] > WALL[0] && p[0] < WALL[1] && p[1] > WALL[2] && p[1] < WALL[3]
}

pub fn in_free_space(p: &[f64]) -> bool {
    (0.0..=SIZE).contains(&p[0]) && (0.0..=SIZE).contains(&p[1]) && !strictly_inside_wall(p)
}

/// Whether the straight segment `p → q` stays in the arena and out of the
/// wall's interior (sliding along its surface is allowed).
pub fn segment_clear(p: &[f64], q: &[f64]) -> bool {
    if !in_free_space(p) || !in_free_space(q) {
        return false;
    }
    let mut lo: f64 = 0.0;
    let mut hi: f64 = 1.0;
    for axis in 0..2 {
        let (a, b) = (WALL[2 * axis], WALL[2 * axis + 1]);
        let d = q[axis] - p[axis];
        if d == 0.0 {
            if !(p[axis] > a && p[axis] < b) {
                return true;
            }
        } else {
            let (t1, t2) = ((a - p[axis]) / d, (b - p[axis]) / d);
            lo = lo.max(t1.min(t2));
            hi = hi.min(t1.max(t2));
        }
    }
    lo >= hi
}

pub fn reset(rng: &mut Rng) -> Vec<f64> {
    let c = cell_center(START_CELL);
    vec![c[0] + rng.random_range(-0.1..0.1), c[1] + rng.random_range(-0.1..0.1)]
}

pub fn step(state: &[f64], a: &[f64]) -> Step {
    let p = [state[0], state[1]];
    if libm::sqrt(a[0] * a[0] + a[1] * a[1]) > SPEED_LIMIT {
        return Step { next_state: p.to_vec(), reward: 0.0, done: true };
    }
    let q = [p[0] + DT * a[0], p[1] + DT * a[1]];
    let candidates = [q, [q[0], p[1]], [p[0], q[1]]];
    let next = candidates
        .iter()
        .map(|c| [round32(c[0]), round32(c[1])])
        .find(|c| segment_clear(&p, c))
        .unwrap_or(p);
    let done = in_goal(&next);
    Step { next_state: next.to_vec(), reward: if done { 1.0 } else { 0.0 }, done }
}

fn neighbours(cell: usize) -> impl Iterator<Item = usize> {
    let (r, c) = ((cell / 3) as isize, (cell % 3) as isize);
    [(r - 1, c), (r + 1, c), (r, c - 1), (r, c + 1)]
        .into_iter()
        .filter(|&(r, c)| (0..3).contains(&r) && (0..3).contains(&c))
        .map(|(r, c)| (r * 3 + c) as usize)
        .filter(|n| !BLOCKED.contains(n))
}

/// First cell after `from` on a shortest path to `to`.
pub fn next_cell(from: usize, to: usize) -> usize {
    if from == to || BLOCKED.contains(&from) {
        return to;
    }
    // breadth-first search backwards from the target gives each cell its successor
    let mut succ = [usize::MAX; 9];
    succ[to] = to;
    let mut queue = VecDeque::from([to]);
    while let Some(c) = queue.pop_front() {
        for n in neighbours(c) {
            if succ[n] == usize::MAX {
                succ[n] = c;
                queue.push_back(n);
            }
        }
    }
    succ[from]
}

/// Waypoint follower toward `target` with Gaussian action noise, rescaled
/// to speed at most [`CRUISE`].
pub fn navigate(state: &[f64], target: usize, noise: f64, rng: &mut Rng) -> Vec<f64> {
    let w = cell_center(next_cell(cell_of(state), target));
    let mut v: Vec<f64> = (0..2)
        .map(|i| {
            let n = if noise > 0.0 { noise * normal(rng) } else { 0.0 };
            GAIN * (w[i] - state[i]) + n
        })
        .collect();
    let speed = libm::sqrt(v[0] * v[0] + v[1] * v[1]);
    if speed > CRUISE {
        v.iter_mut().for_each(|x| *x *= CRUISE / speed);
    }
    v
}

pub fn free_cells() -> impl Iterator<Item = usize> {
    (0..9).filter(|c| !BLOCKED.contains(c))
}

/// A free cell other than the one containing `state`.
pub fn random_target(state: &[f64], rng: &mut Rng) -> usize {
    let here = cell_of(state);
    let options: Vec<usize> = free_cells().filter(|&c| c != here).collect();
    options[rng.random_range(0..options.len())]
}
