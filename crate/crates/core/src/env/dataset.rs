use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::index;
use serde::{Deserialize, Serialize};

use super::{EnvError, EnvKind, Policy, Scripted};
use crate::rng::{self, streams, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Behavior {
    Random,
    Medium,
    Expert,
    /// Random and medium transitions, alternating.
    MediumReplayMix,
    /// Medium and expert transitions, alternating.
    MediumExpertMix,
}

impl Behavior {
    pub const ALL: [Behavior; 5] =
        [Behavior::Random, Behavior::Medium, Behavior::Expert, Behavior::MediumReplayMix, Behavior::MediumExpertMix];

    pub fn label(self) -> &'static str {
        match self {
            Behavior::Random => "random",
            Behavior::Medium => "medium",
            Behavior::Expert => "expert",
            Behavior::MediumReplayMix => "medium-replay-mix",
            Behavior::MediumExpertMix => "medium-expert-mix",
        }
    }

    pub fn from_label(label: &str) -> Result<Self, EnvError> {
        Behavior::ALL
            .into_iter()
            .find(|b| b.label() == label)
            .ok_or_else(|| EnvError::UnknownBehavior(label.into()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub state: Vec<f64>,
    pub action: Vec<f64>,
    pub reward: f64,
    pub next_state: Vec<f64>,
    pub done: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetMeta {
    pub env: String,
    pub behavior: String,
    pub seed: u64,
    pub size: usize,
    /// Fraction of the parent dataset kept by [`subsample`] (1 when generated).
    pub fraction: f64,
}

/// Column-major store of `f32` transitions.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub meta: DatasetMeta,
    pub state_dim: usize,
    pub action_dim: usize,
    pub states: Vec<f32>,
    pub actions: Vec<f32>,
    pub rewards: Vec<f32>,
    pub next_states: Vec<f32>,
    pub dones: Vec<bool>,
}

impl Dataset {
    pub fn empty(meta: DatasetMeta, state_dim: usize, action_dim: usize) -> Self {
        Dataset {
            meta,
            state_dim,
            action_dim,
            states: Vec::new(),
            actions: Vec::new(),
            rewards: Vec::new(),
            next_states: Vec::new(),
            dones: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }

    pub fn push(&mut self, t: &Transition) {
        self.states.extend(t.state.iter().map(|&x| x as f32));
        self.actions.extend(t.action.iter().map(|&x| x as f32));
        self.rewards.push(t.reward as f32);
        self.next_states.extend(t.next_state.iter().map(|&x| x as f32));
        self.dones.push(t.done);
        self.meta.size = self.len();
    }

    pub fn state(&self, i: usize) -> &[f32] {
        &self.states[i * self.state_dim..(i + 1) * self.state_dim]
    }

    pub fn action(&self, i: usize) -> &[f32] {
        &self.actions[i * self.action_dim..(i + 1) * self.action_dim]
    }

    pub fn next_state(&self, i: usize) -> &[f32] {
        &self.next_states[i * self.state_dim..(i + 1) * self.state_dim]
    }

    pub fn transition(&self, i: usize) -> Transition {
        let f = |v: &[f32]| v.iter().map(|&x| x as f64).collect();
        Transition {
            state: f(self.state(i)),
            action: f(self.action(i)),
            reward: self.rewards[i] as f64,
            next_state: f(self.next_state(i)),
            done: self.dones[i],
        }
    }

    /// Column lengths agree, values are finite and the dataset is nonempty.
    pub fn validate(&self) -> Result<(), EnvError> {
        let n = self.len();
        if n == 0 {
            return Err(EnvError::EmptyDataset);
        }
        let bad = |what: &str| Err(EnvError::Inconsistent(format!("{what} column has the wrong length")));
        if self.states.len() != n * self.state_dim || self.next_states.len() != n * self.state_dim {
            return bad("state");
        }
        if self.actions.len() != n * self.action_dim {
            return bad("action");
        }
        if self.dones.len() != n {
            return bad("done");
        }
        if self.meta.size != n {
            return Err(EnvError::Inconsistent(format!("metadata size {} != {n}", self.meta.size)));
        }
        let finite = self.states.iter().chain(&self.actions).chain(&self.rewards).chain(&self.next_states);
        if finite.into_iter().any(|x| !x.is_finite()) {
            return Err(EnvError::Inconsistent("non-finite value".into()));
        }
        Ok(())
    }

    fn select(&self, idx: &[usize]) -> Dataset {
        let mut out = Dataset::empty(self.meta.clone(), self.state_dim, self.action_dim);
        for &i in idx {
            out.states.extend_from_slice(self.state(i));
            out.actions.extend_from_slice(self.action(i));
            out.rewards.push(self.rewards[i]);
            out.next_states.extend_from_slice(self.next_state(i));
            out.dones.push(self.dones[i]);
        }
        out.meta.size = out.len();
        out
    }
}

/// Roll `policy` out until exactly `n` transitions are collected, restarting
/// at termination or the horizon. `begin` runs at each reset.
pub fn generate_with_policy<P: Policy>(
    env: EnvKind,
    policy: &mut P,
    mut begin: impl FnMut(&mut P, &[f64], &mut Rng),
    n: usize,
    rng: &mut Rng,
    meta: DatasetMeta,
) -> Result<Dataset, EnvError> {
    if n == 0 {
        return Err(EnvError::EmptyDataset);
    }
    let spec = env.spec();
    let mut ds = Dataset::empty(meta, spec.state_dim, spec.action_dim);
    let mut state = env.reset(rng);
    begin(policy, &state, rng);
    let mut t = 0;
    while ds.len() < n {
        let action: Vec<f64> = policy
            .act(&state, rng)
            .iter()
            .zip(&spec.action_bounds)
            .map(|(a, b)| super::round32(b.clip(*a)))
            .collect();
        let step = env.step(&state, &action, rng)?;
        t += 1;
        ds.push(&Transition {
            state: state.clone(),
            action,
            reward: step.reward,
            next_state: step.next_state.clone(),
            done: step.done,
        });
        if step.done || t == spec.horizon {
            state = env.reset(rng);
            begin(policy, &state, rng);
            t = 0;
        } else {
            state = step.next_state;
        }
    }
    Ok(ds)
}

fn scripted(env: EnvKind, behavior: Behavior, n: usize, rng: &mut Rng, meta: DatasetMeta) -> Result<Dataset, EnvError> {
    let mut policy = Scripted::new(env, behavior);
    generate_with_policy(env, &mut policy, |p, s, r| p.begin_episode(s, r), n, rng, meta)
}

/// Offline dataset of exactly `n` transitions from a scripted behavior tier.
pub fn generate_dataset(env: EnvKind, behavior: Behavior, n: usize, seed: u64) -> Result<Dataset, EnvError> {
    if n == 0 {
        return Err(EnvError::EmptyDataset);
    }
    let meta = DatasetMeta { env: env.name().into(), behavior: behavior.label().into(), seed, size: n, fraction: 1.0 };
    let pair = match behavior {
        Behavior::MediumReplayMix => Some((Behavior::Random, Behavior::Medium)),
        Behavior::MediumExpertMix => Some((Behavior::Medium, Behavior::Expert)),
        _ => None,
    };
    let Some((first, second)) = pair else {
        let mut rng = rng::stream(seed, streams::DATASET);
        return scripted(env, behavior, n, &mut rng, meta);
    };
    let n_first = n.div_ceil(2);
    let mut rng_a = rng::stream(seed, streams::DATASET);
    let mut rng_b = rng::stream(seed, streams::DATASET + 0x100);
    let a = scripted(env, first, n_first, &mut rng_a, meta.clone())?;
    let b = if n > n_first { Some(scripted(env, second, n - n_first, &mut rng_b, meta.clone())?) } else { None };
    let mut out = Dataset::empty(meta, a.state_dim, a.action_dim);
    for i in 0..n_first {
        out.push(&a.transition(i));
        if let Some(b) = &b {
            if i < b.len() {
                out.push(&b.transition(i));
            }
        }
    }
    Ok(out)
}

/// Uniform sample without replacement of `⌊fraction·N⌋` transitions, kept in
/// their original order.
pub fn subsample(dataset: &Dataset, fraction: f64, seed: u64) -> Result<Dataset, EnvError> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(EnvError::Fraction(fraction));
    }
    let n = dataset.len();
    // the nudge keeps decimal fractions such as 0.29·100 from flooring one short
    let k = libm::floor(fraction * n as f64 + 1e-9) as usize;
    if k == 0 {
        return Err(EnvError::EmptySubsample { n, fraction });
    }
    let mut rng = rng::stream(seed, streams::SUBSAMPLE);
    let mut idx = index::sample(&mut rng, n, k).into_vec();
    idx.sort_unstable();
    let mut out = dataset.select(&idx);
    out.meta.fraction = dataset.meta.fraction * fraction;
    Ok(out)
}
