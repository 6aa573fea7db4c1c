//! Ablation baselines sharing the SCQ loop: CQL, SAC with α = 0, and SAC with
//! layer-normalised critics in place of the penalty.

use serde::{Deserialize, Serialize};

use crate::agent::{bellman_targets, twin_critic_loss, AgentState, Batch, CriticLossOutput, CriticObjective, Penalty, Result, ScqConfig};
use crate::env::EnvError;
use crate::linalg::Matrix;
use crate::nn::squashed_sample;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineKind {
    Cql,
    SacAlpha0,
    ScqLayernorm,
}

impl BaselineKind {
    pub const ALL: [BaselineKind; 3] = [BaselineKind::Cql, BaselineKind::SacAlpha0, BaselineKind::ScqLayernorm];

    pub fn tag(self) -> &'static str {
        match self {
            BaselineKind::Cql => "cql",
            BaselineKind::SacAlpha0 => "sac_alpha0",
            BaselineKind::ScqLayernorm => "scq_layernorm",
        }
    }

    pub fn from_tag(tag: &str) -> Result<Self> {
        BaselineKind::ALL
            .into_iter()
            .find(|k| k.tag() == tag)
            .ok_or_else(|| crate::agent::AgentError::Config(alloc::format!("unknown baseline {tag:?}")))
    }
}

/// Rewrite `base` into the baseline's config. Pure: no state is created.
///
/// `cql` keeps α and swaps the penalty; the other two set α = 0 and switch
/// off the CVAE and OOD sampling, `scq_layernorm` also normalising every
/// critic hidden layer.
pub fn make_baseline(kind: BaselineKind, base: &ScqConfig) -> ScqConfig {
    let mut c = base.clone();
    c.ood_detection = false;
    match kind {
        BaselineKind::Cql => c.objective = CriticObjective::Cql,
        BaselineKind::SacAlpha0 => c.alpha = 0.0,
        BaselineKind::ScqLayernorm => {
            c.alpha = 0.0;
            c.critic_layer_norm = true;
        }
    }
    c
}

/// `α·Σ_i (mean Q_i(s, a_π) − mean Q_i(s, a)) + ½·mean Σ_i (Q_i − y)²`, with
/// one policy action per state from `policy_eps` and target actions from
/// `next_eps`.
pub fn cql_critic_loss(
    batch: &Batch,
    agent: &AgentState,
    cfg: &ScqConfig,
    alpha: f64,
    policy_eps: &Matrix,
    next_eps: &Matrix,
) -> Result<CriticLossOutput> {
    if batch.rewards.is_empty() {
        return Err(EnvError::EmptyDataset.into());
    }
    let targets = bellman_targets(agent, batch, next_eps, agent.lambda(cfg), cfg.discount)?;
    let head = agent.actor.forward(&batch.states)?;
    let policy_actions = squashed_sample(&head, policy_eps, &agent.bounds)?.actions;
    twin_critic_loss(agent, batch, &targets, Penalty::PolicyGap { alpha, policy_actions: &policy_actions })
}

/// CQL loss against explicit policy actions (used when the policy sample
/// is fixed, e.g. to dataset actions).
pub fn cql_critic_loss_at(
    batch: &Batch,
    agent: &AgentState,
    cfg: &ScqConfig,
    alpha: f64,
    policy_actions: &Matrix,
    next_eps: &Matrix,
) -> Result<CriticLossOutput> {
    let targets = bellman_targets(agent, batch, next_eps, agent.lambda(cfg), cfg.discount)?;
    twin_critic_loss(agent, batch, &targets, Penalty::PolicyGap { alpha, policy_actions })
}
