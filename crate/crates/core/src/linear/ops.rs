use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::linalg::{self, LinalgError, Lu, Matrix};

use super::{
    check_shapes, DatasetDistribution, LinearError, LinearMdp, OodMask, PolicyMatrix, QWeights,
    MAX_CONDITION,
};

/// `V(s) = Σ_a π(a|s) q(s,a)`.
pub fn state_values(policy: &PolicyMatrix, q: &[f64]) -> Vec<f64> {
    let na = policy.n_actions();
    (0..policy.n_states())
        .map(|s| linalg::dot(policy.probs().row(s), &q[s * na..(s + 1) * na]))
        .collect()
}

/// Exact backup `(B^π q)(s,a) = r(s,a) + γ Σ_{s'} P(s'|s,a) Σ_{a'} π(a'|s') q(s',a')`.
pub fn bellman_backup(mdp: &LinearMdp, policy: &PolicyMatrix, q: &[f64]) -> Result<Vec<f64>, LinearError> {
    check_shapes(mdp, policy)?;
    if q.len() != mdp.n_pairs() {
        return Err(LinearError::Shape("q length != n_pairs".into()));
    }
    let v = state_values(policy, q);
    let pv = mdp.transitions().mat_vec(&v)?;
    let g = mdp.discount();
    Ok(mdp.rewards().iter().zip(pv).map(|(r, x)| r + g * x).collect())
}

/// The unique fixed point of `B^π`, solved as `(I − γ P Π) Q = r`.
pub fn true_q(mdp: &LinearMdp, policy: &PolicyMatrix) -> Result<Vec<f64>, LinearError> {
    check_shapes(mdp, policy)?;
    let n = mdp.n_pairs();
    let na = mdp.n_actions();
    let g = mdp.discount();
    let p = mdp.transitions();
    let mut m = Matrix::identity(n);
    for i in 0..n {
        for s2 in 0..mdp.n_states() {
            let pss = p[(i, s2)];
            if pss == 0.0 {
                continue;
            }
            for a2 in 0..na {
                m[(i, s2 * na + a2)] -= g * pss * policy.prob(s2, a2);
            }
        }
    }
    let q = linalg::solve_checked(&m, mdp.rewards(), MAX_CONDITION).map_err(|e| match e {
        LinalgError::IllConditioned(c) => LinearError::IllConditionedBellman(c),
        LinalgError::Singular(_) => LinearError::IllConditionedBellman(f64::INFINITY),
        other => LinearError::Linalg(other),
    })?;
    let backed = bellman_backup(mdp, policy, &q)?;
    let residual = linalg::max_abs_diff(&backed, &q);
    if !(residual <= 1e-10) {
        return Err(LinearError::IllConditionedBellman(residual));
    }
    Ok(q)
}

/// Factored `D`-weighted least-squares projector onto the feature span.
///
/// Holds the LU factors of `ΦᵀDΦ + ridge·I`, so repeated projections of
/// different vectors share one factorisation.
#[derive(Debug, Clone)]
pub struct Projector<'a> {
    mdp: &'a LinearMdp,
    weights: &'a [f64],
    lu: Lu,
}

impl<'a> Projector<'a> {
    pub fn new(mdp: &'a LinearMdp, dist: &'a DatasetDistribution, ridge: f64) -> Result<Self, LinearError> {
        if !(ridge >= 0.0) {
            return Err(LinearError::Shape(format!("ridge must be >= 0, got {ridge}")));
        }
        if dist.weights().len() != mdp.n_pairs() {
            return Err(LinearError::Shape("distribution does not match MDP".into()));
        }
        let phi = mdp.features();
        let d = phi.cols();
        let w = dist.weights();
        let mut normal = Matrix::zeros(d, d);
        for (p, &wp) in w.iter().enumerate() {
            if wp == 0.0 {
                continue;
            }
            let row = phi.row(p);
            for i in 0..d {
                let wi = wp * row[i];
                if wi == 0.0 {
                    continue;
                }
                for j in 0..d {
                    normal[(i, j)] += wi * row[j];
                }
            }
        }
        for i in 0..d {
            normal[(i, i)] += ridge;
        }
        let singular = |c: f64| if ridge == 0.0 { LinearError::RidgeRequired } else { LinearError::IllConditionedNormal(c) };
        let lu = Lu::factor(&normal).map_err(|_| singular(f64::INFINITY))?;
        let cond = lu.condition_estimate();
        if !cond.is_finite() || cond > MAX_CONDITION {
            return Err(singular(cond));
        }
        Ok(Projector { mdp, weights: w, lu })
    }

    /// `(ΦᵀDΦ + ridge·I)⁻¹ ΦᵀD v`.
    pub fn weights_for(&self, v: &[f64]) -> Result<Vec<f64>, LinearError> {
        if v.len() != self.mdp.n_pairs() {
            return Err(LinearError::Shape("vector length != n_pairs".into()));
        }
        let dv: Vec<f64> = v.iter().zip(self.weights).map(|(x, w)| x * w).collect();
        let rhs = self.mdp.features().tr_mat_vec(&dv)?;
        Ok(self.lu.solve(&rhs)?)
    }

    /// `P_Φ v`.
    pub fn apply(&self, v: &[f64]) -> Result<Vec<f64>, LinearError> {
        let w = self.weights_for(v)?;
        Ok(self.mdp.features().mat_vec(&w)?)
    }
}

/// LSTD-Q: the `D`-weighted projection of the exact backup of `q_prev`.
pub fn lstdq_update(
    mdp: &LinearMdp,
    dist: &DatasetDistribution,
    policy: &PolicyMatrix,
    q_prev: &[f64],
    ridge: f64,
) -> Result<QWeights, LinearError> {
    let target = bellman_backup(mdp, policy, q_prev)?;
    Ok(QWeights(Projector::new(mdp, dist, ridge)?.weights_for(&target)?))
}

pub fn projection_apply(mdp: &LinearMdp, dist: &DatasetDistribution, v: &[f64], ridge: f64) -> Result<Vec<f64>, LinearError> {
    Projector::new(mdp, dist, ridge)?.apply(v)
}

/// `π(a|s)·1[a ∈ A_ood(s)]`, left unnormalised.
pub fn ood_policy(policy: &PolicyMatrix, mask: &OodMask) -> Result<Matrix, LinearError> {
    if policy.n_states() != mask.n_states() || policy.n_actions() != mask.n_actions() {
        return Err(LinearError::Shape("policy and mask shapes differ".into()));
    }
    Ok(Matrix::from_fn(policy.n_states(), policy.n_actions(), |s, a| {
        if mask.get(s, a) {
            policy.prob(s, a)
        } else {
            0.0
        }
    }))
}

/// Divide a pair vector by `π_β`.
///
/// Pairs without behavior support keep ratio 0 when their state carries no
/// dataset mass (nothing in the objective sees them; a warning is logged).
/// A nonzero numerator on an unsupported action of a visited state is an error.
fn behavior_ratio(dist: &DatasetDistribution, numer: impl Fn(usize, usize) -> f64) -> Result<Vec<f64>, LinearError> {
    let beh = dist.behavior();
    let (ns, na) = (beh.n_states(), beh.n_actions());
    let mut out = vec![0.0; ns * na];
    for s in 0..ns {
        for a in 0..na {
            let num = numer(s, a);
            let pb = beh.prob(s, a);
            if pb > 0.0 {
                out[s * na + a] = num / pb;
            } else if num != 0.0 {
                if dist.state_mass(s) > 0.0 {
                    return Err(LinearError::UnsupportedPair { state: s, action: a });
                }
                log::warn!("pair ({s},{a}) has no behavior support and an unvisited state; ratio set to 0");
            }
        }
    }
    Ok(out)
}

fn check_policy_dist(policy: &PolicyMatrix, dist: &DatasetDistribution) -> Result<(), LinearError> {
    let beh = dist.behavior();
    if policy.n_states() != beh.n_states() || policy.n_actions() != beh.n_actions() {
        return Err(LinearError::Shape("policy and behavior shapes differ".into()));
    }
    Ok(())
}

/// `π_ood/π_β` as a pair vector.
pub fn ood_ratio(dist: &DatasetDistribution, policy: &PolicyMatrix, mask: &OodMask) -> Result<Vec<f64>, LinearError> {
    check_policy_dist(policy, dist)?;
    let pood = ood_policy(policy, mask)?;
    behavior_ratio(dist, |s, a| pood[(s, a)])
}

/// `(π − π_β)/π_β` as a pair vector.
pub fn cql_ratio(dist: &DatasetDistribution, policy: &PolicyMatrix) -> Result<Vec<f64>, LinearError> {
    check_policy_dist(policy, dist)?;
    let beh = dist.behavior();
    behavior_ratio(dist, |s, a| policy.prob(s, a) - beh.prob(s, a))
}

/// `(π_idd − π_β)/π_β`, with `π_idd = π·1[a ∉ A_ood(s)]`.
pub fn idd_ratio(dist: &DatasetDistribution, policy: &PolicyMatrix, mask: &OodMask) -> Result<Vec<f64>, LinearError> {
    check_policy_dist(policy, dist)?;
    let pood = ood_policy(policy, mask)?;
    let beh = dist.behavior();
    behavior_ratio(dist, |s, a| (policy.prob(s, a) - pood[(s, a)]) - beh.prob(s, a))
}

fn penalised_update(
    mdp: &LinearMdp,
    dist: &DatasetDistribution,
    policy: &PolicyMatrix,
    q_prev: &[f64],
    alpha: f64,
    ridge: f64,
    penalty: &[f64],
) -> Result<QWeights, LinearError> {
    if !(alpha >= 0.0) {
        return Err(LinearError::Shape(format!("alpha must be >= 0, got {alpha}")));
    }
    let proj = Projector::new(mdp, dist, ridge)?;
    let mut w = proj.weights_for(&bellman_backup(mdp, policy, q_prev)?)?;
    if alpha != 0.0 {
        let wp = proj.weights_for(penalty)?;
        for (wi, pi) in w.iter_mut().zip(wp) {
            *wi -= alpha * pi;
        }
    }
    Ok(QWeights(w))
}

/// SCQ: LSTD-Q minus `α·P_Φ(π_ood/π_β)`, in weight space.
pub fn scq_update(
    mdp: &LinearMdp,
    dist: &DatasetDistribution,
    policy: &PolicyMatrix,
    mask: &OodMask,
    q_prev: &[f64],
    alpha: f64,
    ridge: f64,
) -> Result<QWeights, LinearError> {
    check_shapes(mdp, policy)?;
    let penalty = ood_ratio(dist, policy, mask)?;
    penalised_update(mdp, dist, policy, q_prev, alpha, ridge, &penalty)
}

/// CQL: LSTD-Q minus `α·P_Φ((π − π_β)/π_β)`, in weight space.
pub fn cql_update(
    mdp: &LinearMdp,
    dist: &DatasetDistribution,
    policy: &PolicyMatrix,
    q_prev: &[f64],
    alpha: f64,
    ridge: f64,
) -> Result<QWeights, LinearError> {
    check_shapes(mdp, policy)?;
    let penalty = cql_ratio(dist, policy)?;
    penalised_update(mdp, dist, policy, q_prev, alpha, ridge, &penalty)
}

/// State-wise penalty inner products `⟨π(·|s), (P_Φ u)(s,·)⟩`.
#[derive(Debug, Clone, PartialEq)]
pub struct FTerms {
    /// `u = (π − π_β)/π_β`
    pub f: Vec<f64>,
    /// `u = π_ood/π_β`
    pub f_ood: Vec<f64>,
    /// `u = (π_idd − π_β)/π_β`
    pub f_idd: Vec<f64>,
}

pub fn compute_f_terms(
    mdp: &LinearMdp,
    dist: &DatasetDistribution,
    policy: &PolicyMatrix,
    mask: &OodMask,
    ridge: f64,
) -> Result<FTerms, LinearError> {
    check_shapes(mdp, policy)?;
    let proj = Projector::new(mdp, dist, ridge)?;
    let f = state_values(policy, &proj.apply(&cql_ratio(dist, policy)?)?);
    let f_ood = state_values(policy, &proj.apply(&ood_ratio(dist, policy, mask)?)?);
    let f_idd = state_values(policy, &proj.apply(&idd_ratio(dist, policy, mask)?)?);
    Ok(FTerms { f, f_ood, f_idd })
}

/// Smallest SCQ `α` making the update a point-wise lower bound of the true
/// Q-function on every masked pair:
/// `max over masked (s,a) of max((Q̂_LSTDQ − Q_true)/(P_Φ(π_ood/π_β))(s,a), 0)`.
pub fn alpha_min_pointwise(
    mdp: &LinearMdp,
    dist: &DatasetDistribution,
    policy: &PolicyMatrix,
    mask: &OodMask,
    q_prev: &[f64],
    ridge: f64,
) -> Result<f64, LinearError> {
    check_shapes(mdp, policy)?;
    let proj = Projector::new(mdp, dist, ridge)?;
    let lst = proj.apply(&bellman_backup(mdp, policy, q_prev)?)?;
    let q_true = true_q(mdp, policy)?;
    let direction = proj.apply(&ood_ratio(dist, policy, mask)?)?;
    let na = mdp.n_actions();
    let mut alpha: f64 = 0.0;
    for p in 0..mdp.n_pairs() {
        let (s, a) = (p / na, p % na);
        if !mask.get(s, a) {
            continue;
        }
        if !(direction[p] > 0.0) {
            return Err(LinearError::PenaltyVanishes { state: s, action: a, value: direction[p] });
        }
        alpha = alpha.max((lst[p] - q_true[p]) / direction[p]);
    }
    Ok(alpha)
}
