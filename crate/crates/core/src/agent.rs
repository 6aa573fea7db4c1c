//! The SCQ training loop: CVAE update, rejection-sampled OOD actions, the
//! penalised twin-critic update, and the SAC-style actor update with entropy
//! and behaviour-cloning terms, followed by Polyak averaging of the targets.
//!
//! Every stochastic draw comes from a per-iteration stream keyed by
//! `(seed, iteration, component)`, so a run is a pure function of its config
//! and dataset, and switching a component off never shifts another's draws.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng as _;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cvae::{Cvae, CvaeConfig, OodThreshold};
use crate::env::{rollout_returns, Dataset, EnvError, EnvKind, EpisodeStats, Policy};
use crate::linalg::Matrix;
use crate::nn::{
    mean_action, polyak_update, squashed_sample, Adam, Bounds, LrSchedule, Mlp, MlpSpec, NnError, ScheduleKind,
};
use crate::rng::{self, mix64, normal, streams, Rng};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AgentError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Env(#[from] EnvError),
}

pub type Result<T> = core::result::Result<T, AgentError>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntropyMode {
    /// Temperature tuned towards `target_entropy`.
    Auto,
    Fixed(f64),
}

/// Which penalty the critic update carries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CriticObjective {
    /// Penalise `min(Q_A, Q_B)` at detected OOD actions.
    Scq,
    /// Penalise policy-action Q relative to dataset-action Q, per critic.
    Cql,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScqConfig {
    pub alpha: f64,
    pub beta: f64,
    pub entropy: EntropyMode,
    /// Auto mode only; `None` means `−action_dim`.
    pub target_entropy: Option<f64>,
    pub initial_lambda: f64,
    pub critic_lr: f64,
    pub actor_lr: f64,
    pub cvae_lr: f64,
    pub actor_schedule: ScheduleKind,
    /// Length of the cosine schedule; usually the run length.
    pub schedule_steps: u64,
    pub batch_size: usize,
    pub discount: f64,
    pub upsilon: f64,
    pub ood_sample_budget: usize,
    pub warmup_iters: u64,
    pub seed: u64,
    pub actor_hidden: Vec<usize>,
    pub critic_hidden: Vec<usize>,
    pub critic_layer_norm: bool,
    pub cvae_hidden: usize,
    pub kl_weight: f64,
    /// Train the CVAE and sample OOD actions. Off for the α = 0 and CQL baselines.
    pub ood_detection: bool,
    /// Penalise the max-distance fallback draw when no OOD action was found.
    pub penalize_fallback: bool,
    pub objective: CriticObjective,
}

impl Default for ScqConfig {
    fn default() -> Self {
        ScqConfig {
            alpha: 1.0,
            beta: 0.0,
            entropy: EntropyMode::Auto,
            target_entropy: None,
            initial_lambda: 1.0,
            critic_lr: 3e-4,
            actor_lr: 3e-4,
            cvae_lr: 1e-3,
            actor_schedule: ScheduleKind::Cosine,
            schedule_steps: 1_000_000,
            batch_size: 256,
            discount: 0.99,
            upsilon: 5e-3,
            ood_sample_budget: 10,
            warmup_iters: 5_000,
            seed: 0,
            actor_hidden: vec![400, 400],
            critic_hidden: vec![400, 400],
            critic_layer_norm: false,
            cvae_hidden: 750,
            kl_weight: 0.5,
            ood_detection: true,
            penalize_fallback: false,
            objective: CriticObjective::Scq,
        }
    }
}

impl ScqConfig {
    /// Defaults for `env` at the full architecture: the maze gets the lower
    /// critic rate and a behaviour-cloning term. The line bandit runs at a
    /// fixed temperature, since the automatic one keeps rising there and drags
    /// Q steadily negative.
    pub fn for_env(env: EnvKind) -> Self {
        let mut c = ScqConfig::default();
        match env {
            EnvKind::PointMaze => {
                c.critic_lr = 1e-4;
                c.beta = 1.0;
                c.alpha = 1.0;
            }
            EnvKind::PushSlide => c.alpha = 1.0,
            EnvKind::LineBandit => {
                c.alpha = 1.0;
                c.entropy = EntropyMode::Fixed(0.05);
            }
        }
        c
    }

    /// [`ScqConfig::for_env`] shrunk to desk scale: narrow networks and small
    /// batches so 50k iterations take seconds.
    pub fn desk(env: EnvKind) -> Self {
        let mut c = ScqConfig::for_env(env);
        c.actor_hidden = vec![32, 32];
        c.critic_hidden = vec![32, 32];
        c.cvae_hidden = 64;
        c.batch_size = 64;
        c.ood_sample_budget = 5;
        c.schedule_steps = 50_000;
        c
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(AgentError::Config(m));
        let nonneg = [("alpha", self.alpha), ("beta", self.beta)];
        for (name, v) in nonneg {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be a finite value >= 0, got {v}"));
            }
        }
        let pos = [
            ("critic_lr", self.critic_lr),
            ("actor_lr", self.actor_lr),
            ("cvae_lr", self.cvae_lr),
            ("initial_lambda", self.initial_lambda),
            ("kl_weight", self.kl_weight),
        ];
        for (name, v) in pos {
            if !(v > 0.0 && v.is_finite()) {
                return bad(format!("{name} must be positive, got {v}"));
            }
        }
        if let EntropyMode::Fixed(l) = self.entropy {
            if !(l >= 0.0 && l.is_finite()) {
                return bad(format!("fixed entropy temperature must be >= 0, got {l}"));
            }
        }
        if let Some(t) = self.target_entropy {
            if !t.is_finite() {
                return bad(format!("target_entropy must be finite, got {t}"));
            }
        }
        if !(0.0..1.0).contains(&self.discount) {
            return bad(format!("discount must lie in [0, 1), got {}", self.discount));
        }
        if !(0.0..=1.0).contains(&self.upsilon) {
            return bad(format!("upsilon must lie in [0, 1], got {}", self.upsilon));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if self.ood_sample_budget == 0 {
            return bad("ood_sample_budget must be positive".into());
        }
        if self.cvae_hidden == 0 || self.actor_hidden.contains(&0) || self.critic_hidden.contains(&0) {
            return bad("hidden widths must be positive".into());
        }
        if self.schedule_steps == 0 {
            return bad("schedule_steps must be positive".into());
        }
        Ok(())
    }
}

/// Dataset columns as `f64` matrices, built once per run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingData {
    pub states: Matrix,
    pub actions: Matrix,
    pub rewards: Vec<f64>,
    pub next_states: Matrix,
    pub dones: Vec<bool>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub states: Matrix,
    pub actions: Matrix,
    pub rewards: Vec<f64>,
    pub next_states: Matrix,
    pub dones: Vec<bool>,
}

impl TrainingData {
    pub fn from_dataset(ds: &Dataset) -> Result<Self> {
        ds.validate()?;
        let n = ds.len();
        let to = |v: &[f32], cols: usize| Matrix::from_vec(n, cols, v.iter().map(|&x| x as f64).collect());
        let shape = |_| AgentError::Config("dataset columns do not match their dimensions".into());
        Ok(TrainingData {
            states: to(&ds.states, ds.state_dim).map_err(shape)?,
            actions: to(&ds.actions, ds.action_dim).map_err(shape)?,
            rewards: ds.rewards.iter().map(|&r| r as f64).collect(),
            next_states: to(&ds.next_states, ds.state_dim).map_err(shape)?,
            dones: ds.dones.clone(),
        })
    }

    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }

    pub fn batch(&self, idx: &[usize]) -> Batch {
        Batch {
            states: self.states.select_rows(idx),
            actions: self.actions.select_rows(idx),
            rewards: idx.iter().map(|&i| self.rewards[i]).collect(),
            next_states: self.next_states.select_rows(idx),
            dones: idx.iter().map(|&i| self.dones[i]).collect(),
        }
    }

    /// `batch_size` indices drawn uniformly with replacement.
    pub fn sample_indices(&self, batch_size: usize, rng: &mut Rng) -> Vec<usize> {
        (0..batch_size).map(|_| rng.random_range(0..self.len())).collect()
    }

    /// Largest absolute reward over `1 − γ`: a bound on any true `|Q|`.
    pub fn return_scale(&self, discount: f64) -> f64 {
        self.rewards.iter().fold(0.0f64, |m, r| m.max(r.abs())) / (1.0 - discount)
    }
}

/// Everything one training loop owns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentState {
    pub state_dim: usize,
    pub bounds: Vec<Bounds>,
    pub actor: Mlp,
    pub critic_a: Mlp,
    pub critic_b: Mlp,
    pub target_a: Mlp,
    pub target_b: Mlp,
    /// `log λ`; the temperature itself is always positive.
    pub log_lambda: f64,
    pub actor_opt: Adam,
    pub critic_a_opt: Adam,
    pub critic_b_opt: Adam,
    pub lambda_opt: Adam,
    pub cvae: Option<Cvae>,
    pub threshold: OodThreshold,
    pub iteration: u64,
}

/// Stream for component `id` at iteration `k`.
pub fn iteration_stream(seed: u64, k: u64, id: u64) -> Rng {
    rng::stream(mix64(seed).wrapping_add(mix64(k ^ 0xA5A5_A5A5)), id)
}

/// Streams beyond the shared labels in [`streams`].
pub mod agent_streams {
    pub const TARGET_NOISE: u64 = 0x20;
    pub const CVAE_INIT: u64 = 0x21;
    pub const CRITIC_INIT: u64 = 0x22;
    pub const ACTOR_INIT: u64 = 0x23;
    pub const CQL_NOISE: u64 = 0x24;
}

impl AgentState {
    pub fn new(state_dim: usize, bounds: &[Bounds], cfg: &ScqConfig) -> Result<Self> {
        cfg.validate()?;
        let adim = bounds.len();
        let mut actor_rng = rng::stream(cfg.seed, agent_streams::ACTOR_INIT);
        let actor = Mlp::new(MlpSpec::new(state_dim, &cfg.actor_hidden, 2 * adim), &mut actor_rng);
        let critic_spec =
            MlpSpec::new(state_dim + adim, &cfg.critic_hidden, 1).with_layer_norm(cfg.critic_layer_norm);
        let mut critic_rng = rng::stream(cfg.seed, agent_streams::CRITIC_INIT);
        let critic_a = Mlp::new(critic_spec.clone(), &mut critic_rng);
        let critic_b = Mlp::new(critic_spec, &mut critic_rng);
        let cvae = cfg.ood_detection.then(|| {
            let c = CvaeConfig { hidden: cfg.cvae_hidden, kl_weight: cfg.kl_weight, lr: cfg.cvae_lr };
            Cvae::new(state_dim, bounds, &c, &mut rng::stream(cfg.seed, agent_streams::CVAE_INIT))
        });
        let log_lambda = match cfg.entropy {
            EntropyMode::Auto => libm::log(cfg.initial_lambda),
            EntropyMode::Fixed(_) => 0.0,
        };
        Ok(AgentState {
            state_dim,
            bounds: bounds.to_vec(),
            actor_opt: Adam::new(actor.n_params(), cfg.actor_lr),
            critic_a_opt: Adam::new(critic_a.n_params(), cfg.critic_lr),
            critic_b_opt: Adam::new(critic_b.n_params(), cfg.critic_lr),
            lambda_opt: Adam::new(1, cfg.actor_lr),
            target_a: critic_a.clone(),
            target_b: critic_b.clone(),
            actor,
            critic_a,
            critic_b,
            log_lambda,
            cvae,
            threshold: OodThreshold::new(),
            iteration: 0,
        })
    }

    pub fn for_env(env: EnvKind, cfg: &ScqConfig) -> Result<Self> {
        let spec = env.spec();
        AgentState::new(spec.state_dim, &spec.action_bounds, cfg)
    }

    pub fn action_dim(&self) -> usize {
        self.bounds.len()
    }

    /// Current entropy temperature λ.
    pub fn lambda(&self, cfg: &ScqConfig) -> f64 {
        match cfg.entropy {
            EntropyMode::Auto => libm::exp(self.log_lambda),
            EntropyMode::Fixed(l) => l,
        }
    }

    pub fn target_entropy(&self, cfg: &ScqConfig) -> f64 {
        cfg.target_entropy.unwrap_or(-(self.action_dim() as f64))
    }

    /// `min(Q_A, Q_B)` at each `(s, a)` row.
    pub fn min_q(&self, states: &Matrix, actions: &Matrix) -> Result<Vec<f64>> {
        let x = states.hstack(actions);
        let qa = self.critic_a.forward(&x)?;
        let qb = self.critic_b.forward(&x)?;
        Ok(qa.as_slice().iter().zip(qb.as_slice()).map(|(a, b)| a.min(*b)).collect())
    }

    /// Deterministic action `center + half·tanh(mean)` per state row.
    pub fn greedy_actions(&self, states: &Matrix) -> Result<Matrix> {
        let head = self.actor.forward(states)?;
        Ok(mean_action(&head, &self.bounds))
    }

    /// Order-sensitive digest of both online critics' parameters.
    pub fn critic_checksum(&self) -> u64 {
        let mut h = 0xCBF2_9CE4_8422_2325u64;
        for p in self.critic_a.params().iter().chain(self.critic_b.params()) {
            h = mix64(h ^ p.to_bits());
        }
        h
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OodSampleResult {
    pub actions: Matrix,
    pub found_mask: Vec<bool>,
    /// Reconstruction distance of each returned action.
    pub fallback_distances: Vec<f64>,
    /// Actor draws consumed per row.
    pub draws: Vec<usize>,
}

impl OodSampleResult {
    pub fn acceptance_rate(&self) -> f64 {
        if self.found_mask.is_empty() {
            return 0.0;
        }
        self.found_mask.iter().filter(|&&f| f).count() as f64 / self.found_mask.len() as f64
    }
}

/// Rejection sampling: up to `budget` actor draws per state; the first draw
/// flagged OOD is kept, otherwise the draw with the largest reconstruction
/// distance is returned with `found_mask = false`.
pub fn sample_ood_actions(
    states: &Matrix,
    actor: &Mlp,
    bounds: &[Bounds],
    cvae: &Cvae,
    threshold: &OodThreshold,
    budget: usize,
    rng: &mut Rng,
) -> Result<OodSampleResult> {
    let n = states.rows();
    let adim = bounds.len();
    let head = actor.forward(states)?;
    let mut actions = Matrix::zeros(n, adim);
    let mut found_mask = vec![false; n];
    let mut best = vec![f64::NEG_INFINITY; n];
    let mut draws = vec![0; n];
    let mut pending: Vec<usize> = (0..n).collect();
    for _ in 0..budget.max(1) {
        if pending.is_empty() {
            break;
        }
        let eps = Matrix::from_fn(pending.len(), adim, |_, _| normal(rng));
        let sample = squashed_sample(&head.select_rows(&pending), &eps, bounds)?;
        let dist = cvae.distances(&states.select_rows(&pending), &sample.actions)?;
        for (p, &row) in pending.iter().enumerate() {
            draws[row] += 1;
            let d = dist[p];
            if threshold.is_ood_distance(d) {
                found_mask[row] = true;
            }
            if found_mask[row] || d > best[row] {
                best[row] = d;
                actions.row_mut(row).copy_from_slice(sample.actions.row(p));
            }
        }
        pending.retain(|&r| !found_mask[r]);
    }
    Ok(OodSampleResult { actions, found_mask, fallback_distances: best, draws })
}

#[derive(Debug, Clone, PartialEq)]
pub struct CriticLossOutput {
    pub loss: f64,
    /// `½·mean Σ_i (Q_i − y)²`.
    pub bellman: f64,
    /// The penalty's contribution to `loss` (already multiplied by α).
    pub penalty: f64,
    /// Mean `min(Q_A, Q_B)` at the dataset actions.
    pub mean_q: f64,
    pub mean_abs_q: f64,
    pub grads_a: Vec<f64>,
    pub grads_b: Vec<f64>,
}

/// Penalty attached to the twin Bellman error.
pub(crate) enum Penalty<'a> {
    None,
    /// `α · mean over rows of min(Q_A, Q_B)(s_row, a_row)`.
    MinAt { alpha: f64, rows: Vec<usize>, actions: &'a Matrix },
    /// `α · Σ_i (mean Q_i(s, a_π) − mean Q_i(s, a))`.
    PolicyGap { alpha: f64, policy_actions: &'a Matrix },
}

/// Soft twin-min target `y = r + γ(1−done)[min Q̄(s', a') − λ log π(a'|s')]`
/// with `a' = squash(actor(s'), next_eps)`.
pub fn bellman_targets(agent: &AgentState, batch: &Batch, next_eps: &Matrix, lambda: f64, discount: f64) -> Result<Vec<f64>> {
    let head = agent.actor.forward(&batch.next_states)?;
    let next = squashed_sample(&head, next_eps, &agent.bounds)?;
    let x = batch.next_states.hstack(&next.actions);
    let qa = agent.target_a.forward(&x)?;
    let qb = agent.target_b.forward(&x)?;
    Ok((0..batch.rewards.len())
        .map(|r| {
            let cont = if batch.dones[r] { 0.0 } else { 1.0 };
            let v = qa.as_slice()[r].min(qb.as_slice()[r]) - lambda * next.log_prob[r];
            batch.rewards[r] + discount * cont * v
        })
        .collect())
}

pub(crate) fn twin_critic_loss(agent: &AgentState, batch: &Batch, targets: &[f64], penalty: Penalty<'_>) -> Result<CriticLossOutput> {
    let n = batch.rewards.len();
    let x = batch.states.hstack(&batch.actions);
    let (qa, ca) = agent.critic_a.forward_cached(&x)?;
    let (qb, cb) = agent.critic_b.forward_cached(&x)?;
    let inv_n = 1.0 / n as f64;
    let mut grads_a = vec![0.0; agent.critic_a.n_params()];
    let mut grads_b = vec![0.0; agent.critic_b.n_params()];
    let mut ga = Matrix::zeros(n, 1);
    let mut gb = Matrix::zeros(n, 1);
    let mut bellman = 0.0;
    let (mut mean_q, mut mean_abs_q) = (0.0, 0.0);
    for r in 0..n {
        let (a, b) = (qa.as_slice()[r], qb.as_slice()[r]);
        let (da, db) = (a - targets[r], b - targets[r]);
        bellman += 0.5 * (da * da + db * db);
        ga[(r, 0)] = da * inv_n;
        gb[(r, 0)] = db * inv_n;
        mean_q += a.min(b);
        mean_abs_q += a.min(b).abs();
    }
    bellman *= inv_n;
    mean_q *= inv_n;
    mean_abs_q *= inv_n;

    let mut penalty_value = 0.0;
    match penalty {
        Penalty::None => {}
        Penalty::MinAt { alpha, rows, actions } => {
            if alpha != 0.0 && !rows.is_empty() {
                let m = rows.len();
                let xp = batch.states.select_rows(&rows).hstack(&actions.select_rows(&rows));
                let (pa, pca) = agent.critic_a.forward_cached(&xp)?;
                let (pb, pcb) = agent.critic_b.forward_cached(&xp)?;
                let mut gpa = Matrix::zeros(m, 1);
                let mut gpb = Matrix::zeros(m, 1);
                let w = alpha / m as f64;
                for i in 0..m {
                    let (a, b) = (pa.as_slice()[i], pb.as_slice()[i]);
                    // ties go to critic A
                    if a <= b {
                        penalty_value += a;
                        gpa[(i, 0)] = w;
                    } else {
                        penalty_value += b;
                        gpb[(i, 0)] = w;
                    }
                }
                penalty_value *= w;
                agent.critic_a.backward(&pca, &gpa, &mut grads_a)?;
                agent.critic_b.backward(&pcb, &gpb, &mut grads_b)?;
            }
        }
        Penalty::PolicyGap { alpha, policy_actions } => {
            if alpha != 0.0 {
                let xp = batch.states.hstack(policy_actions);
                let (pa, pca) = agent.critic_a.forward_cached(&xp)?;
                let (pb, pcb) = agent.critic_b.forward_cached(&xp)?;
                let w = alpha * inv_n;
                for r in 0..n {
                    penalty_value += (pa.as_slice()[r] - qa.as_slice()[r]) + (pb.as_slice()[r] - qb.as_slice()[r]);
                    ga[(r, 0)] -= w;
                    gb[(r, 0)] -= w;
                }
                penalty_value *= w;
                let gp = Matrix::from_fn(n, 1, |_, _| w);
                agent.critic_a.backward(&pca, &gp, &mut grads_a)?;
                agent.critic_b.backward(&pcb, &gp, &mut grads_b)?;
            }
        }
    }
    agent.critic_a.backward(&ca, &ga, &mut grads_a)?;
    agent.critic_b.backward(&cb, &gb, &mut grads_b)?;
    Ok(CriticLossOutput { loss: bellman + penalty_value, bellman, penalty: penalty_value, mean_q, mean_abs_q, grads_a, grads_b })
}

/// SCQ critic objective on one batch: `α·mean over penalised rows of
/// min(Q_A, Q_B)(s, a_ood) + ½·mean Σ_i (Q_i(s, a) − y)²`.
///
/// `alpha` is the effective weight (0 during warm-up). Rows with
/// `found_mask = false` are skipped unless `penalize_fallback` is set.
pub fn critic_loss(
    batch: &Batch,
    ood: &OodSampleResult,
    agent: &AgentState,
    cfg: &ScqConfig,
    alpha: f64,
    next_eps: &Matrix,
) -> Result<CriticLossOutput> {
    let lambda = agent.lambda(cfg);
    let targets = bellman_targets(agent, batch, next_eps, lambda, cfg.discount)?;
    let rows: Vec<usize> = (0..ood.found_mask.len()).filter(|&r| ood.found_mask[r] || cfg.penalize_fallback).collect();
    twin_critic_loss(agent, batch, &targets, Penalty::MinAt { alpha, rows, actions: &ood.actions })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ActorLossOutput {
    pub loss: f64,
    pub grads: Vec<f64>,
    pub mean_log_prob: f64,
    pub mean_q: f64,
    /// Mean of `β‖a − a_b‖²`.
    pub bc: f64,
}

/// `mean[λ log π(a|s) − min(Q_A, Q_B)(s, a) + β‖a − a_b‖²]` with
/// `a = squash(actor(s), eps)`; gradients w.r.t. the actor parameters only.
pub fn actor_loss(
    states: &Matrix,
    behavior_actions: &Matrix,
    eps: &Matrix,
    agent: &AgentState,
    lambda: f64,
    beta: f64,
) -> Result<ActorLossOutput> {
    let n = states.rows();
    let adim = agent.action_dim();
    let (head, cache) = agent.actor.forward_cached(states)?;
    let sample = squashed_sample(&head, eps, &agent.bounds)?;
    let x = states.hstack(&sample.actions);
    let (qa, ca) = agent.critic_a.forward_cached(&x)?;
    let (qb, cb) = agent.critic_b.forward_cached(&x)?;
    let inv_n = 1.0 / n as f64;
    let mut gqa = Matrix::zeros(n, 1);
    let mut gqb = Matrix::zeros(n, 1);
    let (mut loss, mut mean_q, mut mean_lp, mut bc) = (0.0, 0.0, 0.0, 0.0);
    let mut d_actions = Matrix::zeros(n, adim);
    for r in 0..n {
        let (a, b) = (qa.as_slice()[r], qb.as_slice()[r]);
        let q = a.min(b);
        if a <= b {
            gqa[(r, 0)] = -inv_n;
        } else {
            gqb[(r, 0)] = -inv_n;
        }
        let mut res2 = 0.0;
        for j in 0..adim {
            let d = sample.actions[(r, j)] - behavior_actions[(r, j)];
            res2 += d * d;
            d_actions[(r, j)] = 2.0 * beta * d * inv_n;
        }
        let lp = sample.log_prob[r];
        loss += lambda * lp - q + beta * res2;
        mean_q += q;
        mean_lp += lp;
        bc += beta * res2;
    }
    // ∂(−min Q)/∂a through whichever critic is the minimum
    let mut scratch_a = vec![0.0; agent.critic_a.n_params()];
    let mut scratch_b = vec![0.0; agent.critic_b.n_params()];
    let gia = agent.critic_a.backward(&ca, &gqa, &mut scratch_a)?;
    let gib = agent.critic_b.backward(&cb, &gqb, &mut scratch_b)?;
    let sd = agent.state_dim;
    for r in 0..n {
        for j in 0..adim {
            d_actions[(r, j)] += gia[(r, sd + j)] + gib[(r, sd + j)];
        }
    }
    let d_lp = vec![lambda * inv_n; n];
    let d_head = sample.backward(&d_actions, &d_lp, &agent.bounds);
    let mut grads = vec![0.0; agent.actor.n_params()];
    agent.actor.backward(&cache, &d_head, &mut grads)?;
    Ok(ActorLossOutput { loss: loss * inv_n, grads, mean_log_prob: mean_lp * inv_n, mean_q: mean_q * inv_n, bc: bc * inv_n })
}

/// One metrics row; the CSV column order is [`IterationMetrics::COLUMNS`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IterationMetrics {
    pub iteration: u64,
    pub critic_loss: f64,
    pub bellman_loss: f64,
    /// Penalty contribution to the critic loss; exactly 0 during warm-up.
    pub alpha_term: f64,
    pub actor_loss: f64,
    pub mean_q: f64,
    pub mean_abs_q: f64,
    pub delta: f64,
    pub ood_rate: f64,
    pub lambda: f64,
    pub actor_lr: f64,
    /// Digest of the critic parameters the actor update queried.
    pub critic_checksum: u64,
}

impl IterationMetrics {
    pub const COLUMNS: [&'static str; 12] = [
        "iteration",
        "critic_loss",
        "bellman_loss",
        "alpha_term",
        "actor_loss",
        "mean_q",
        "mean_abs_q",
        "delta",
        "ood_rate",
        "lambda",
        "actor_lr",
        "critic_checksum",
    ];
}

/// Iterations per pass over the data: `⌈N / batch⌉`.
pub fn epoch_length(n: usize, batch_size: usize) -> u64 {
    n.div_ceil(batch_size).max(1) as u64
}

/// Refresh δ with a full frozen-model pass over the dataset.
pub fn refresh_threshold(agent: &mut AgentState, data: &TrainingData) -> Result<()> {
    if let Some(cvae) = &agent.cvae {
        agent.threshold = OodThreshold::from_pass(cvae, &data.states, &data.actions, 1024)?;
    }
    Ok(())
}

/// Effective penalty weight at the agent's current iteration.
pub fn effective_alpha(agent: &AgentState, cfg: &ScqConfig) -> f64 {
    match cfg.objective {
        CriticObjective::Cql => cfg.alpha,
        CriticObjective::Scq if !cfg.ood_detection || agent.iteration < cfg.warmup_iters => 0.0,
        CriticObjective::Scq => cfg.alpha,
    }
}

/// One iteration: batch draw, CVAE step (with δ refreshed at each epoch
/// boundary), OOD sampling, critic step, actor and temperature step, Polyak
/// update of the targets.
pub fn train_iteration(agent: &mut AgentState, data: &TrainingData, cfg: &ScqConfig) -> Result<IterationMetrics> {
    if data.is_empty() {
        return Err(EnvError::EmptyDataset.into());
    }
    let k = agent.iteration;
    let stream = |id| iteration_stream(cfg.seed, k, id);
    let idx = data.sample_indices(cfg.batch_size, &mut stream(streams::BATCH));
    let batch = data.batch(&idx);
    let n = batch.rewards.len();
    let adim = agent.action_dim();

    // CVAE
    if k % epoch_length(data.len(), cfg.batch_size) == 0 {
        refresh_threshold(agent, data)?;
    }
    if let Some(cvae) = agent.cvae.as_mut() {
        cvae.train_step(&batch.states, &batch.actions, &mut stream(streams::CVAE))?;
    }

    // OOD actions and critic
    let alpha = effective_alpha(agent, cfg);
    let lambda = agent.lambda(cfg);
    let mut r = stream(agent_streams::TARGET_NOISE);
    let next_eps = Matrix::from_fn(n, adim, |_, _| normal(&mut r));
    let targets = bellman_targets(agent, &batch, &next_eps, lambda, cfg.discount)?;
    let mut ood_rate = 0.0;
    let out = match cfg.objective {
        CriticObjective::Scq => match (&agent.cvae, alpha > 0.0) {
            (Some(cvae), true) => {
                let ood = sample_ood_actions(
                    &batch.states,
                    &agent.actor,
                    &agent.bounds,
                    cvae,
                    &agent.threshold,
                    cfg.ood_sample_budget,
                    &mut stream(streams::OOD),
                )?;
                ood_rate = ood.acceptance_rate();
                let rows = (0..n).filter(|&r| ood.found_mask[r] || cfg.penalize_fallback).collect();
                twin_critic_loss(agent, &batch, &targets, Penalty::MinAt { alpha, rows, actions: &ood.actions })?
            }
            _ => twin_critic_loss(agent, &batch, &targets, Penalty::None)?,
        },
        CriticObjective::Cql => {
            let head = agent.actor.forward(&batch.states)?;
            let mut r = stream(agent_streams::CQL_NOISE);
            let eps = Matrix::from_fn(n, adim, |_, _| normal(&mut r));
            let pa = squashed_sample(&head, &eps, &agent.bounds)?.actions;
            twin_critic_loss(agent, &batch, &targets, Penalty::PolicyGap { alpha, policy_actions: &pa })?
        }
    };
    agent.critic_a_opt.step(agent.critic_a.params_mut(), &out.grads_a)?;
    agent.critic_b_opt.step(agent.critic_b.params_mut(), &out.grads_b)?;

    // actor against the freshly updated critics
    let critic_checksum = agent.critic_checksum();
    let mut r = stream(streams::ACTOR);
    let eps = Matrix::from_fn(n, adim, |_, _| normal(&mut r));
    let act = actor_loss(&batch.states, &batch.actions, &eps, agent, lambda, cfg.beta)?;
    let schedule = match cfg.actor_schedule {
        ScheduleKind::Constant => LrSchedule::constant(cfg.actor_lr),
        ScheduleKind::Cosine => LrSchedule::cosine(cfg.actor_lr, cfg.schedule_steps),
    };
    let actor_lr = schedule.lr_at(k);
    agent.actor_opt.step_with_lr(agent.actor.params_mut(), &act.grads, actor_lr)?;
    if cfg.entropy == EntropyMode::Auto {
        // d/d log λ of −log λ·(log π + target entropy)
        let g = -(act.mean_log_prob + agent.target_entropy(cfg));
        let mut p = [agent.log_lambda];
        agent.lambda_opt.step(&mut p, &[g])?;
        agent.log_lambda = p[0];
    }

    polyak_update(agent.target_a.params_mut(), agent.critic_a.params(), cfg.upsilon)?;
    polyak_update(agent.target_b.params_mut(), agent.critic_b.params(), cfg.upsilon)?;
    agent.iteration += 1;

    Ok(IterationMetrics {
        iteration: k,
        critic_loss: out.loss,
        bellman_loss: out.bellman,
        alpha_term: out.penalty,
        actor_loss: act.loss,
        mean_q: out.mean_q,
        mean_abs_q: out.mean_abs_q,
        delta: agent.threshold.delta,
        ood_rate,
        lambda,
        actor_lr,
        critic_checksum,
    })
}

/// Deterministic actor policy: `center + half·tanh(mean)`.
pub struct GreedyPolicy<'a> {
    pub agent: &'a AgentState,
}

impl Policy for GreedyPolicy<'_> {
    fn act(&mut self, state: &[f64], _rng: &mut Rng) -> Vec<f64> {
        let s = Matrix::from_fn(1, state.len(), |_, j| state[j]);
        match self.agent.greedy_actions(&s) {
            Ok(a) => a.into_vec(),
            Err(_) => self.agent.bounds.iter().map(|b| b.center()).collect(),
        }
    }
}

/// Undiscounted returns of the greedy policy over `n_episodes`.
pub fn evaluate_policy(agent: &AgentState, env: EnvKind, n_episodes: usize, seed: u64) -> Result<EpisodeStats> {
    evaluate(&mut GreedyPolicy { agent }, env, n_episodes, seed)
}

/// The evaluation protocol of [`evaluate_policy`] for any policy without
/// per-episode state.
pub fn evaluate<P: Policy>(policy: &mut P, env: EnvKind, n_episodes: usize, seed: u64) -> Result<EpisodeStats> {
    Ok(rollout_returns(env, policy, |_, _, _| {}, n_episodes, seed)?)
}
