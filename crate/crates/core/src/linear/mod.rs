//! Exact finite-support linear-MDP analysis of conservative Q-learning.
//!
//! A [`LinearMdp`] has finitely many states and actions, a feature matrix `Φ`
//! (one row per state-action pair, pair index `s * n_actions + a`), transition
//! measures `μ` with `P(s'|s,a) = ⟨φ(s,a), μ(s')⟩` and reward weights `θ` with
//! `r(s,a) = ⟨φ(s,a), θ⟩`. On top of it this module computes
//!
//! - the exact policy Q-function ([`true_q`]) and one-step Bellman backups,
//! - the `D`-weighted projection `P_Φ = Φ(ΦᵀDΦ)⁻¹ΦᵀD` and the LSTD-Q update,
//! - closed-form CQL and SCQ updates (penalised LSTD-Q in weight space),
//! - the state-wise penalty inner products `f`, `f_ood`, `f_idd`,
//! - verifiers for point-wise pessimism of SCQ and for the ordering
//!   `V_CQL ≤ V_SCQ ≤ V_true` of state values ([`verify`]).
//!
//! `π_ood` is always the *unnormalised* restriction `π(a|s)·1[a ∈ A_ood(s)]`;
//! the matrix identities behind the closed forms hold for that form.

mod instance;
mod ops;
mod verify;

pub use instance::{random_instance, FeatureFamily, Instance, InstanceConfig};
pub use ops::{
    alpha_min_pointwise, bellman_backup, compute_f_terms, cql_ratio, cql_update, idd_ratio,
    lstdq_update, ood_policy, ood_ratio, projection_apply, scq_update, state_values, true_q,
    FTerms, Projector,
};
pub use verify::{
    alpha_cql_for_ordering, alpha_cql_for_ordering_over, verify_pointwise_pessimism,
    verify_value_ordering, VerificationReport, INEQUALITY_SLACK,
};

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{LinalgError, Matrix};

/// Default ridge added to `ΦᵀDΦ`.
pub const DEFAULT_RIDGE: f64 = 1e-10;
/// Condition-number ceiling for every linear solve in this module.
pub const MAX_CONDITION: f64 = 1e12;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LinearError {
    #[error("invalid linear MDP: {0}")]
    InvalidMdp(String),
    #[error("invalid dataset distribution: {0}")]
    InvalidDistribution(String),
    #[error("invalid policy: {0}")]
    InvalidPolicy(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("ill-conditioned Bellman solve (condition estimate {0:e})")]
    IllConditionedBellman(f64),
    #[error("normal matrix ΦᵀDΦ is singular; use ridge > 0")]
    RidgeRequired,
    #[error("ill-conditioned normal equations (condition estimate {0:e})")]
    IllConditionedNormal(f64),
    #[error("OOD penalty requires behavior support at state {state}, action {action}")]
    UnsupportedPair { state: usize, action: usize },
    #[error("penalty direction vanishes at OOD pair (state {state}, action {action}): {value:e}")]
    PenaltyVanishes { state: usize, action: usize, value: f64 },
    #[error("value-ordering precondition violated: f_ood = {value:e} at state {state}")]
    OrderingPrecondition { state: usize, value: f64 },
    #[error("at least one iteration")]
    ZeroIterations,
    #[error("linear algebra: {0}")]
    Linalg(#[from] LinalgError),
}

/// A finite-support linear MDP.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "LinearMdpDoc", into = "LinearMdpDoc")]
pub struct LinearMdp {
    n_states: usize,
    n_actions: usize,
    features: Matrix,
    transition_measures: Matrix,
    reward_weights: Vec<f64>,
    discount: f64,
    // derived
    transitions: Matrix,
    rewards: Vec<f64>,
}

/// JSON document form of a [`LinearMdp`]; matrices are flattened row-major.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinearMdpDoc {
    pub n_states: usize,
    pub n_actions: usize,
    pub feature_dim: usize,
    pub features: Vec<f64>,
    pub transition_measures: Vec<f64>,
    pub reward_weights: Vec<f64>,
    pub discount: f64,
}

impl TryFrom<LinearMdpDoc> for LinearMdp {
    type Error = LinearError;

    fn try_from(doc: LinearMdpDoc) -> Result<Self, LinearError> {
        let n_pairs = doc.n_states * doc.n_actions;
        let features = Matrix::from_vec(n_pairs, doc.feature_dim, doc.features)
            .map_err(|_| LinearError::InvalidMdp("features length != n_states*n_actions*feature_dim".into()))?;
        let mu = Matrix::from_vec(doc.n_states, doc.feature_dim, doc.transition_measures)
            .map_err(|_| LinearError::InvalidMdp("transition_measures length != n_states*feature_dim".into()))?;
        LinearMdp::new(doc.n_states, doc.n_actions, features, mu, doc.reward_weights, doc.discount)
    }
}

impl From<LinearMdp> for LinearMdpDoc {
    fn from(m: LinearMdp) -> Self {
        LinearMdpDoc {
            n_states: m.n_states,
            n_actions: m.n_actions,
            feature_dim: m.features.cols(),
            features: m.features.into_vec(),
            transition_measures: m.transition_measures.into_vec(),
            reward_weights: m.reward_weights,
            discount: m.discount,
        }
    }
}

impl LinearMdp {
    /// Validates the feature norms and that every induced transition row
    /// `Φμᵀ` is a probability vector. Entries in `[-1e-10, 0)` are clamped to 0.
    pub fn new(
        n_states: usize,
        n_actions: usize,
        features: Matrix,
        transition_measures: Matrix,
        reward_weights: Vec<f64>,
        discount: f64,
    ) -> Result<Self, LinearError> {
        let bad = |m: String| Err(LinearError::InvalidMdp(m));
        if n_states == 0 || n_actions == 0 {
            return bad("n_states and n_actions must be positive".into());
        }
        let d = features.cols();
        if d == 0 {
            return bad("feature_dim must be positive".into());
        }
        if features.rows() != n_states * n_actions {
            return bad(format!("features has {} rows, expected {}", features.rows(), n_states * n_actions));
        }
        if transition_measures.rows() != n_states || transition_measures.cols() != d {
            return bad("transition_measures must be n_states x feature_dim".into());
        }
        if reward_weights.len() != d {
            return bad("reward_weights must have feature_dim entries".into());
        }
        if !(0.0..1.0).contains(&discount) {
            return bad(format!("discount {discount} outside [0, 1)"));
        }
        if !features.is_finite() || !transition_measures.is_finite() || reward_weights.iter().any(|x| !x.is_finite()) {
            return bad("non-finite entries".into());
        }
        for p in 0..features.rows() {
            let norm = libm::sqrt(features.row(p).iter().map(|x| x * x).sum::<f64>());
            if norm > 1.0 + 1e-12 {
                return bad(format!("feature row {p} has norm {norm} > 1"));
            }
        }
        let mut transitions = features.matmul(&transition_measures.transpose())?;
        for p in 0..transitions.rows() {
            let row = transitions.row_mut(p);
            for x in row.iter_mut() {
                if *x < -1e-10 {
                    return bad(format!("transition row {p} has negative entry {x}"));
                }
                if *x < 0.0 {
                    *x = 0.0;
                }
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > 1e-8 {
                return bad(format!("transition row {p} sums to {sum}"));
            }
        }
        let rewards = features.mat_vec(&reward_weights)?;
        Ok(LinearMdp {
            n_states,
            n_actions,
            features,
            transition_measures,
            reward_weights,
            discount,
            transitions,
            rewards,
        })
    }

    /// One-hot features: the tabular MDP with the given transition tensor
    /// `P[(s,a), s']` and reward vector.
    pub fn tabular(n_states: usize, n_actions: usize, transitions: &Matrix, rewards: &[f64], discount: f64) -> Result<Self, LinearError> {
        let n = n_states * n_actions;
        if transitions.rows() != n || transitions.cols() != n_states || rewards.len() != n {
            return Err(LinearError::Shape("tabular MDP shapes".into()));
        }
        // with Φ = I, μ(s') stacks the columns of P
        LinearMdp::new(n_states, n_actions, Matrix::identity(n), transitions.transpose(), rewards.to_vec(), discount)
    }

    #[inline]
    pub fn n_states(&self) -> usize {
        self.n_states
    }
    #[inline]
    pub fn n_actions(&self) -> usize {
        self.n_actions
    }
    #[inline]
    pub fn n_pairs(&self) -> usize {
        self.n_states * self.n_actions
    }
    #[inline]
    pub fn feature_dim(&self) -> usize {
        self.features.cols()
    }
    #[inline]
    pub fn discount(&self) -> f64 {
        self.discount
    }
    pub fn features(&self) -> &Matrix {
        &self.features
    }
    pub fn transition_measures(&self) -> &Matrix {
        &self.transition_measures
    }
    pub fn reward_weights(&self) -> &[f64] {
        &self.reward_weights
    }
    /// `P[(s,a), s']`, clamped.
    pub fn transitions(&self) -> &Matrix {
        &self.transitions
    }
    pub fn rewards(&self) -> &[f64] {
        &self.rewards
    }
    #[inline]
    pub fn pair(&self, s: usize, a: usize) -> usize {
        s * self.n_actions + a
    }
}

/// A stochastic policy on a finite MDP; row `s` is `π(·|s)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyMatrix {
    probs: Matrix,
}

impl PolicyMatrix {
    pub fn new(probs: Matrix) -> Result<Self, LinearError> {
        for s in 0..probs.rows() {
            let row = probs.row(s);
            if row.iter().any(|p| !(0.0..=1.0).contains(p)) {
                return Err(LinearError::InvalidPolicy(format!("row {s} has entries outside [0, 1]")));
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > 1e-10 {
                return Err(LinearError::InvalidPolicy(format!("row {s} sums to {sum}")));
            }
        }
        Ok(PolicyMatrix { probs })
    }

    pub fn uniform(n_states: usize, n_actions: usize) -> Self {
        PolicyMatrix { probs: Matrix::from_fn(n_states, n_actions, |_, _| 1.0 / n_actions as f64) }
    }

    /// Deterministic policy picking `actions[s]` at state `s`.
    pub fn deterministic(n_actions: usize, actions: &[usize]) -> Self {
        PolicyMatrix {
            probs: Matrix::from_fn(actions.len(), n_actions, |s, a| if actions[s] == a { 1.0 } else { 0.0 }),
        }
    }

    /// Greedy policy with respect to `q` (first maximiser on ties).
    pub fn greedy(n_states: usize, n_actions: usize, q: &[f64]) -> Self {
        let actions: Vec<usize> = (0..n_states)
            .map(|s| {
                let row = &q[s * n_actions..(s + 1) * n_actions];
                let mut best = 0;
                for a in 1..n_actions {
                    if row[a] > row[best] {
                        best = a;
                    }
                }
                best
            })
            .collect();
        Self::deterministic(n_actions, &actions)
    }

    pub fn n_states(&self) -> usize {
        self.probs.rows()
    }
    pub fn n_actions(&self) -> usize {
        self.probs.cols()
    }
    pub fn probs(&self) -> &Matrix {
        &self.probs
    }
    #[inline]
    pub fn prob(&self, s: usize, a: usize) -> f64 {
        self.probs[(s, a)]
    }
    /// Flattened pair vector `π(a|s)` in pair order.
    pub fn as_pair_vec(&self) -> &[f64] {
        self.probs.as_slice()
    }
}

/// Membership of each pair in the OOD action set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OodMask {
    n_states: usize,
    n_actions: usize,
    mask: Vec<bool>,
}

impl OodMask {
    pub fn new(n_states: usize, n_actions: usize, mask: Vec<bool>) -> Result<Self, LinearError> {
        if mask.len() != n_states * n_actions {
            return Err(LinearError::Shape("mask length != n_states*n_actions".into()));
        }
        Ok(OodMask { n_states, n_actions, mask })
    }
    pub fn filled(n_states: usize, n_actions: usize, value: bool) -> Self {
        OodMask { n_states, n_actions, mask: alloc::vec![value; n_states * n_actions] }
    }
    pub fn from_rows(rows: &[Vec<bool>]) -> Result<Self, LinearError> {
        let n_actions = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != n_actions) {
            return Err(LinearError::Shape("ragged mask rows".into()));
        }
        Ok(OodMask { n_states: rows.len(), n_actions, mask: rows.concat() })
    }
    #[inline]
    pub fn get(&self, s: usize, a: usize) -> bool {
        self.mask[s * self.n_actions + a]
    }
    pub fn n_states(&self) -> usize {
        self.n_states
    }
    pub fn n_actions(&self) -> usize {
        self.n_actions
    }
    pub fn as_slice(&self) -> &[bool] {
        &self.mask
    }
    pub fn is_empty(&self) -> bool {
        !self.mask.iter().any(|&m| m)
    }
}

/// Dataset distribution over pairs, `weight(s,a) = d^{π_β}(s)·π_β(a|s)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetDistribution {
    weights: Vec<f64>,
    behavior: PolicyMatrix,
}

impl DatasetDistribution {
    pub fn new(weights: Vec<f64>, behavior: PolicyMatrix) -> Result<Self, LinearError> {
        let bad = |m: String| Err(LinearError::InvalidDistribution(m));
        let (ns, na) = (behavior.n_states(), behavior.n_actions());
        if weights.len() != ns * na {
            return bad("weights length != n_states*n_actions".into());
        }
        if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return bad("weights must be finite and nonnegative".into());
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-10 {
            return bad(format!("weights sum to {total}"));
        }
        for s in 0..ns {
            for a in 0..na {
                if weights[s * na + a] > 0.0 && behavior.prob(s, a) <= 0.0 {
                    return bad(format!("positive weight at ({s},{a}) with π_β = 0"));
                }
            }
        }
        Ok(DatasetDistribution { weights, behavior })
    }

    /// Build from a state visitation distribution `d(s)` and behavior policy.
    pub fn from_state_distribution(state_probs: &[f64], behavior: PolicyMatrix) -> Result<Self, LinearError> {
        let na = behavior.n_actions();
        if state_probs.len() != behavior.n_states() {
            return Err(LinearError::Shape("state distribution length".into()));
        }
        let weights = (0..state_probs.len() * na)
            .map(|p| state_probs[p / na] * behavior.prob(p / na, p % na))
            .collect();
        Self::new(weights, behavior)
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }
    pub fn behavior(&self) -> &PolicyMatrix {
        &self.behavior
    }
    /// Marginal state mass `Σ_a weight(s,a)`.
    pub fn state_mass(&self, s: usize) -> f64 {
        let na = self.behavior.n_actions();
        self.weights[s * na..(s + 1) * na].iter().sum()
    }
}

/// Linear Q-function weights, `Q(s,a) = ⟨φ(s,a), w⟩`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QWeights(pub Vec<f64>);

impl QWeights {
    pub fn q_values(&self, mdp: &LinearMdp) -> Vec<f64> {
        // shapes agree by construction of every producer
        mdp.features().mat_vec(&self.0).unwrap_or_default()
    }
    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|x| x.is_finite())
    }
}

pub(crate) fn check_shapes(mdp: &LinearMdp, policy: &PolicyMatrix) -> Result<(), LinearError> {
    if policy.n_states() != mdp.n_states() || policy.n_actions() != mdp.n_actions() {
        return Err(LinearError::Shape(format!(
            "policy is {}x{}, MDP is {}x{}",
            policy.n_states(),
            policy.n_actions(),
            mdp.n_states(),
            mdp.n_actions()
        )));
    }
    Ok(())
}
