//! Toy continuous-control tasks standing in for the usual offline RL suites.
//!
//! | name          | state            | action      | reward                         |
//! |---------------|------------------|-------------|--------------------------------|
//! | `point-maze`  | (x, y)           | velocity    | sparse, 1 on entering the goal |
//! | `push-slide`  | (px, py, vx, vy) | force       | dense, `−‖p‖² − 0.01‖a‖²`      |
//! | `line-bandit` | context c        | scalar      | cliffed, two-mode (see module) |
//!
//! States and actions are rounded to `f32` as they are produced, so a stored
//! dataset replays bit-exactly.

mod dataset;
pub mod line_bandit;
pub mod point_maze;
pub mod push_slide;

use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nn::Bounds;
use crate::rng::{self, Rng};

pub use dataset::{generate_dataset, generate_with_policy, subsample, Behavior, Dataset, DatasetMeta, Transition};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EnvError {
    #[error("unknown environment {0:?}")]
    UnknownEnv(String),
    #[error("unknown behavior label {0:?}")]
    UnknownBehavior(String),
    #[error("non-finite input to env_step")]
    NonFinite,
    #[error("expected {expected} values, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("nonempty dataset required")]
    EmptyDataset,
    #[error("fraction {0} outside (0, 1]")]
    Fraction(f64),
    #[error("subsample of {n} transitions at fraction {fraction} is empty")]
    EmptySubsample { n: usize, fraction: f64 },
    #[error("inconsistent dataset: {0}")]
    Inconsistent(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RewardKind {
    Dense,
    Sparse,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvSpec {
    pub name: String,
    pub state_dim: usize,
    pub action_dim: usize,
    pub action_bounds: Vec<Bounds>,
    pub horizon: usize,
    pub reward_kind: RewardKind,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EnvKind {
    PointMaze,
    PushSlide,
    LineBandit,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Step {
    pub next_state: Vec<f64>,
    pub reward: f64,
    pub done: bool,
}

#[inline]
pub fn round32(x: f64) -> f64 {
    x as f32 as f64
}

impl EnvKind {
    pub const ALL: [EnvKind; 3] = [EnvKind::PointMaze, EnvKind::PushSlide, EnvKind::LineBandit];

    pub fn name(self) -> &'static str {
        match self {
            EnvKind::PointMaze => "point-maze",
            EnvKind::PushSlide => "push-slide",
            EnvKind::LineBandit => "line-bandit",
        }
    }

    pub fn from_name(name: &str) -> Result<Self, EnvError> {
        EnvKind::ALL
            .into_iter()
            .find(|k| k.name() == name)
            .ok_or_else(|| EnvError::UnknownEnv(name.into()))
    }

    pub fn spec(self) -> EnvSpec {
        let (state_dim, action_dim, horizon, reward_kind) = match self {
            EnvKind::PointMaze => (2, 2, point_maze::HORIZON, RewardKind::Sparse),
            EnvKind::PushSlide => (4, 2, push_slide::HORIZON, RewardKind::Dense),
            EnvKind::LineBandit => (1, 1, line_bandit::HORIZON, RewardKind::Dense),
        };
        EnvSpec {
            name: self.name().into(),
            state_dim,
            action_dim,
            action_bounds: alloc::vec![Bounds::symmetric(1.0); action_dim],
            horizon,
            reward_kind,
        }
    }

    pub fn state_dim(self) -> usize {
        self.spec().state_dim
    }

    pub fn action_dim(self) -> usize {
        self.spec().action_dim
    }

    pub fn reset(self, rng: &mut Rng) -> Vec<f64> {
        let s = match self {
            EnvKind::PointMaze => point_maze::reset(rng),
            EnvKind::PushSlide => push_slide::reset(rng),
            EnvKind::LineBandit => line_bandit::reset(rng),
        };
        s.into_iter().map(round32).collect()
    }

    /// One transition. The action is clipped to the bounds and rounded to
    /// `f32` first; only `line-bandit` consumes `rng` (next context).
    pub fn step(self, state: &[f64], action: &[f64], rng: &mut Rng) -> Result<Step, EnvError> {
        let spec = self.spec();
        if state.len() != spec.state_dim {
            return Err(EnvError::Dimension { expected: spec.state_dim, got: state.len() });
        }
        if action.len() != spec.action_dim {
            return Err(EnvError::Dimension { expected: spec.action_dim, got: action.len() });
        }
        if state.iter().chain(action).any(|x| !x.is_finite()) {
            return Err(EnvError::NonFinite);
        }
        let a: Vec<f64> = action.iter().zip(&spec.action_bounds).map(|(x, b)| round32(b.clip(*x))).collect();
        let mut step = match self {
            EnvKind::PointMaze => point_maze::step(state, &a),
            EnvKind::PushSlide => push_slide::step(state, &a),
            EnvKind::LineBandit => line_bandit::step(state, &a, rng),
        };
        step.next_state.iter_mut().for_each(|x| *x = round32(*x));
        step.reward = round32(step.reward);
        Ok(step)
    }
}

/// Anything that maps a state to an action.
pub trait Policy {
    fn act(&mut self, state: &[f64], rng: &mut Rng) -> Vec<f64>;
}

/// Scripted controller for one behavior tier.
#[derive(Debug, Clone)]
pub struct Scripted {
    pub env: EnvKind,
    pub behavior: Behavior,
    /// Per-episode goal for the maze's wandering controller.
    target: Option<usize>,
}

impl Scripted {
    pub fn new(env: EnvKind, behavior: Behavior) -> Self {
        Scripted { env, behavior, target: None }
    }

    /// Forget per-episode state; called at every reset.
    pub fn begin_episode(&mut self, state: &[f64], rng: &mut Rng) {
        self.target = match (self.env, self.behavior) {
            (EnvKind::PointMaze, Behavior::Medium) => Some(point_maze::random_target(state, rng)),
            _ => None,
        };
    }
}

impl Policy for Scripted {
    fn act(&mut self, state: &[f64], rng: &mut Rng) -> Vec<f64> {
        match (self.env, self.behavior) {
            (env, Behavior::Random) => {
                use rand::Rng as _;
                (0..env.action_dim()).map(|_| rng.random_range(-1.0..1.0)).collect()
            }
            (EnvKind::PointMaze, Behavior::Expert) => point_maze::navigate(state, point_maze::GOAL_CELL, 0.0, rng),
            (EnvKind::PointMaze, _) => {
                // wander: pick a fresh target cell each time one is reached
                let mut target = self.target.unwrap_or(point_maze::GOAL_CELL);
                if point_maze::cell_of(state) == target {
                    target = point_maze::random_target(state, rng);
                    self.target = Some(target);
                }
                point_maze::navigate(state, target, point_maze::MEDIUM_NOISE, rng)
            }
            (EnvKind::PushSlide, Behavior::Expert) => push_slide::expert(state),
            (EnvKind::PushSlide, _) => push_slide::medium(state, rng),
            (EnvKind::LineBandit, Behavior::Expert) => line_bandit::expert(state),
            (EnvKind::LineBandit, _) => line_bandit::medium(state, rng),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeStats {
    pub mean_return: f64,
    pub returns: Vec<f64>,
}

/// Undiscounted returns of `n_episodes` rollouts (each at most `horizon` steps).
///
/// `begin` is called with the initial state of every episode.
pub fn rollout_returns<P: Policy>(
    env: EnvKind,
    policy: &mut P,
    mut begin: impl FnMut(&mut P, &[f64], &mut Rng),
    n_episodes: usize,
    seed: u64,
) -> Result<EpisodeStats, EnvError> {
    let mut rng = rng::stream(seed, rng::streams::EVAL);
    let horizon = env.spec().horizon;
    let mut returns = Vec::with_capacity(n_episodes);
    for _ in 0..n_episodes {
        let mut s = env.reset(&mut rng);
        begin(policy, &s, &mut rng);
        let mut total = 0.0;
        for _ in 0..horizon {
            let a = policy.act(&s, &mut rng);
            let step = env.step(&s, &a, &mut rng)?;
            total += step.reward;
            s = step.next_state;
            if step.done {
                break;
            }
        }
        returns.push(total);
    }
    let mean_return = crate::stats::mean(&returns);
    Ok(EpisodeStats { mean_return, returns })
}

/// Returns of a scripted controller.
pub fn scripted_returns(env: EnvKind, behavior: Behavior, n_episodes: usize, seed: u64) -> Result<EpisodeStats, EnvError> {
    let mut policy = Scripted::new(env, behavior);
    rollout_returns(env, &mut policy, |p, s, r| p.begin_episode(s, r), n_episodes, seed)
}

/// Anchors of the normalised score.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreScale {
    pub random_score: f64,
    pub expert_score: f64,
}

/// Seed used when the anchors were recorded.
pub const SCORE_SCALE_SEED: u64 = 2024;
pub const SCORE_SCALE_EPISODES: usize = 100;

impl ScoreScale {
    /// Mean returns of the scripted random and expert controllers over
    /// [`SCORE_SCALE_EPISODES`] episodes at [`SCORE_SCALE_SEED`], recorded once.
    pub fn for_env(env: EnvKind) -> Self {
        let (random_score, expert_score) = match env {
            EnvKind::PointMaze => (POINT_MAZE_SCALE[0], POINT_MAZE_SCALE[1]),
            EnvKind::PushSlide => (PUSH_SLIDE_SCALE[0], PUSH_SLIDE_SCALE[1]),
            EnvKind::LineBandit => (LINE_BANDIT_SCALE[0], LINE_BANDIT_SCALE[1]),
        };
        ScoreScale { random_score, expert_score }
    }

    /// Recompute the anchors from scratch.
    pub fn measure(env: EnvKind, n_episodes: usize, seed: u64) -> Result<Self, EnvError> {
        let random_score = scripted_returns(env, Behavior::Random, n_episodes, seed)?.mean_return;
        let expert_score = scripted_returns(env, Behavior::Expert, n_episodes, seed)?.mean_return;
        Ok(ScoreScale { random_score, expert_score })
    }
}

const POINT_MAZE_SCALE: [f64; 2] = [0.0, 1.0];
const PUSH_SLIDE_SCALE: [f64; 2] = [-145.8680079975282, -4.4439037148204275];
const LINE_BANDIT_SCALE: [f64; 2] = [-0.5077066461269547, 9.799999980926513];

/// `100·(raw − random)/(expert − random)`.
pub fn normalized_score(scale: &ScoreScale, raw: f64) -> f64 {
    100.0 * (raw - scale.random_score) / (scale.expert_score - scale.random_score)
}
