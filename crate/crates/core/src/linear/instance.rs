//! Seeded random linear-MDP instances for the verification sweeps.

use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, Exp1};
use serde::{Deserialize, Serialize};

use crate::linalg::Matrix;
use crate::rng::{self, Rng};

use super::{DatasetDistribution, LinearError, LinearMdp, OodMask, PolicyMatrix};

/// How feature rows are drawn.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FeatureFamily {
    /// One-hot features over clusters of actions *within* each state.
    ///
    /// Clusters are spread evenly over states, so `feature_dim ≥ n_states`
    /// and every state has at least two clusters once `feature_dim ≥ 2·n_states`.
    /// The projection averages penalties among actions that share a cluster,
    /// which keeps `P_Φ` entrywise nonnegative.
    ActionAggregated,
    /// Rows drawn uniformly from the probability simplex (nonnegative, norm ≤ 1).
    Simplex,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceConfig {
    pub n_states: usize,
    pub n_actions: usize,
    pub feature_dim: usize,
    pub family: FeatureFamily,
    pub discount: f64,
    /// Probability that a pair lands in the OOD mask.
    pub mask_prob: f64,
    /// Force at least one masked action per state.
    pub ood_every_state: bool,
}

impl InstanceConfig {
    /// `n_states × n_actions` pairs and `feature_dim = pairs / 2`.
    pub fn half_rank(n_states: usize, n_actions: usize) -> Self {
        InstanceConfig {
            n_states,
            n_actions,
            feature_dim: (n_states * n_actions / 2).max(n_states),
            family: FeatureFamily::ActionAggregated,
            discount: 0.9,
            mask_prob: 0.4,
            ood_every_state: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Instance {
    pub mdp: LinearMdp,
    pub dist: DatasetDistribution,
    pub policy: PolicyMatrix,
    pub mask: OodMask,
}

fn simplex(rng: &mut Rng, n: usize) -> Vec<f64> {
    let mut v: Vec<f64> = (0..n).map(|_| Exp1.sample(rng)).collect::<Vec<f64>>();
    let total: f64 = v.iter().sum();
    v.iter_mut().for_each(|x| *x /= total);
    v
}

fn policy_rows(rng: &mut Rng, ns: usize, na: usize) -> Result<PolicyMatrix, LinearError> {
    let mut data = Vec::with_capacity(ns * na);
    for _ in 0..ns {
        data.extend(simplex(rng, na));
    }
    // renormalised rows sum to 1 within rounding
    PolicyMatrix::new(Matrix::from_vec(ns, na, data)?)
}

fn aggregated_features(rng: &mut Rng, ns: usize, na: usize, d: usize) -> Result<Matrix, LinearError> {
    if d < ns || d > ns * na {
        return Err(LinearError::Shape(alloc::format!(
            "action-aggregated features need n_states <= feature_dim <= n_pairs, got {d}"
        )));
    }
    // clusters per state: d / n_states each, the remainder on distinct random states
    let mut per_state = vec![d / ns; ns];
    let mut order: Vec<usize> = (0..ns).collect();
    order.shuffle(rng);
    for &s in order.iter().take(d % ns) {
        per_state[s] += 1;
    }
    let mut phi = Matrix::zeros(ns * na, d);
    let mut offset = 0;
    for s in 0..ns {
        let k = per_state[s];
        let mut labels: Vec<usize> = (0..na).map(|a| if a < k { a } else { rng.random_range(0..k) }).collect();
        labels.shuffle(rng);
        for (a, c) in labels.into_iter().enumerate() {
            phi[(s * na + a, offset + c)] = 1.0;
        }
        offset += k;
    }
    Ok(phi)
}

/// Draw a random instance: features from `config.family`, transition
/// measures whose `d` columns are distributions over next states (so every
/// row of `Φμᵀ` is a convex mixture), rewards `θ ~ U[-1, 1]^d`, a strictly
/// positive behavior policy and state distribution, a random target policy,
/// and an OOD mask.
pub fn random_instance(config: &InstanceConfig, seed: u64) -> Result<Instance, LinearError> {
    let (ns, na, d) = (config.n_states, config.n_actions, config.feature_dim);
    let mut rng = rng::stream(seed, 0x11ea_u64);
    let features = match config.family {
        FeatureFamily::ActionAggregated => aggregated_features(&mut rng, ns, na, d)?,
        FeatureFamily::Simplex => {
            let mut data = Vec::with_capacity(ns * na * d);
            for _ in 0..ns * na {
                data.extend(simplex(&mut rng, d));
            }
            Matrix::from_vec(ns * na, d, data)?
        }
    };
    let mut mu = Matrix::zeros(ns, d);
    for j in 0..d {
        for (s, x) in simplex(&mut rng, ns).into_iter().enumerate() {
            mu[(s, j)] = x;
        }
    }
    let theta: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mdp = LinearMdp::new(ns, na, features, mu, theta, config.discount)?;

    let state_probs = simplex(&mut rng, ns);
    let behavior = policy_rows(&mut rng, ns, na)?;
    let dist = DatasetDistribution::from_state_distribution(&state_probs, behavior)?;
    let policy = policy_rows(&mut rng, ns, na)?;

    let mut mask: Vec<bool> = (0..ns * na).map(|_| rng.random_bool(config.mask_prob)).collect();
    if config.ood_every_state {
        for s in 0..ns {
            if !mask[s * na..(s + 1) * na].iter().any(|&m| m) {
                mask[s * na + rng.random_range(0..na)] = true;
            }
        }
    }
    let mask = OodMask::new(ns, na, mask)?;
    Ok(Instance { mdp, dist, policy, mask })
}
