//! Batch verification of the two linear-MDP guarantees on random instances:
//! pointwise pessimism on masked pairs, and SCQ values sitting above CQL
//! values at the calibrated CQL weight.
//!
//! Instances whose preconditions fail (a vanishing penalty, missing OOD
//! mass) are counted separately and never count as passes or failures.

use scq_core::linear::{
    alpha_cql_for_ordering_over, lstdq_update, random_instance, true_q, verify_pointwise_pessimism, verify_value_ordering,
    Instance, InstanceConfig, LinearError, VerificationReport, DEFAULT_RIDGE,
};
use serde::{Deserialize, Serialize};

use crate::{LabError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifyLinearConfig {
    pub n_instances: usize,
    /// Feature dimension as a fraction of the number of state-action pairs.
    pub d_fraction: f64,
    pub k_iters: usize,
    pub seed: u64,
    pub n_states: usize,
    pub n_actions: usize,
}

impl VerifyLinearConfig {
    pub fn new(n_instances: usize, d_fraction: f64, k_iters: usize, seed: u64) -> Self {
        VerifyLinearConfig { n_instances, d_fraction, k_iters, seed, n_states: 4, n_actions: 4 }
    }

    /// Instance shape; the feature dimension is clamped to `[n_states, pairs]`.
    pub fn instance_config(&self) -> InstanceConfig {
        let mut c = InstanceConfig::half_rank(self.n_states, self.n_actions);
        let pairs = self.n_states * self.n_actions;
        c.feature_dim = ((self.d_fraction * pairs as f64).round() as usize).clamp(self.n_states, pairs);
        c
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CheckSummary {
    pub passed: usize,
    pub failed: usize,
    pub precondition_skipped: usize,
    /// Largest signed violation over checked instances.
    pub worst_violation: Option<f64>,
    pub worst_masked_violation: Option<f64>,
    pub largest_epsilon: Option<f64>,
    pub failed_seeds: Vec<u64>,
}

impl CheckSummary {
    fn record(&mut self, seed: u64, outcome: std::result::Result<VerificationReport, LinearError>) -> Result<()> {
        let rep = match outcome {
            Ok(r) => r,
            Err(
                LinearError::PenaltyVanishes { .. }
                | LinearError::UnsupportedPair { .. }
                | LinearError::OrderingPrecondition { .. },
            ) => {
                self.precondition_skipped += 1;
                return Ok(());
            }
            Err(e) => return Err(e.into()),
        };
        let max = |cur: Option<f64>, x: f64| Some(cur.map_or(x, |c| c.max(x)));
        self.worst_violation = max(self.worst_violation, rep.max_violation);
        self.worst_masked_violation = max(self.worst_masked_violation, rep.masked_max_violation);
        self.largest_epsilon = max(self.largest_epsilon, rep.epsilon_bound);
        if rep.passed {
            self.passed += 1;
        } else {
            self.failed += 1;
            self.failed_seeds.push(seed);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearSummary {
    pub config: VerifyLinearConfig,
    pub pointwise: CheckSummary,
    pub ordering: CheckSummary,
    /// Largest `|P_Φ B^π Q_true − Q_true|` over unmasked pairs: the error the
    /// feature class adds at the fixed point (0 for one-hot features).
    pub representation_error: f64,
    pub all_passed: bool,
}

fn representation_error(inst: &Instance) -> Result<f64> {
    let q = true_q(&inst.mdp, &inst.policy)?;
    // exact solve when the normal equations allow it, so one-hot features give 0
    let fixed = lstdq_update(&inst.mdp, &inst.dist, &inst.policy, &q, 0.0)
        .or_else(|_| lstdq_update(&inst.mdp, &inst.dist, &inst.policy, &q, DEFAULT_RIDGE))?
        .q_values(&inst.mdp);
    Ok(fixed
        .iter()
        .zip(&q)
        .zip(inst.mask.as_slice())
        .filter(|(_, &masked)| !masked)
        .fold(0.0f64, |m, ((a, b), _)| m.max((a - b).abs())))
}

/// Instance `i` uses seed `cfg.seed + i`.
pub fn verify_linear(cfg: &VerifyLinearConfig) -> Result<LinearSummary> {
    if cfg.k_iters == 0 {
        return Err(LabError::Config(LinearError::ZeroIterations.to_string()));
    }
    if cfg.n_instances == 0 {
        return Err(LabError::Config("n_instances must be positive".into()));
    }
    if !(cfg.d_fraction > 0.0 && cfg.d_fraction <= 1.0) {
        return Err(LabError::Config(format!("d_fraction must lie in (0, 1], got {}", cfg.d_fraction)));
    }
    let icfg = cfg.instance_config();
    let mut pointwise = CheckSummary::default();
    let mut ordering = CheckSummary::default();
    let mut rep_err = 0.0f64;
    for i in 0..cfg.n_instances as u64 {
        let seed = cfg.seed.wrapping_add(i);
        let inst = random_instance(&icfg, seed)?;
        rep_err = rep_err.max(representation_error(&inst)?);
        let seq = [inst.policy.clone(), inst.dist.behavior().clone()];
        pointwise.record(
            seed,
            verify_pointwise_pessimism(&inst.mdp, &inst.dist, &seq, &inst.mask, cfg.k_iters, DEFAULT_RIDGE),
        )?;
        let ord = alpha_cql_for_ordering_over(&inst.mdp, &inst.dist, &inst.policy, &inst.mask, cfg.k_iters, DEFAULT_RIDGE)
            .and_then(|alpha| {
                verify_value_ordering(&inst.mdp, &inst.dist, &inst.policy, &inst.mask, alpha, cfg.k_iters, DEFAULT_RIDGE)
            });
        ordering.record(seed, ord)?;
    }
    let all_passed = pointwise.failed == 0 && ordering.failed == 0;
    Ok(LinearSummary { config: cfg.clone(), pointwise, ordering, representation_error: rep_err, all_passed })
}
