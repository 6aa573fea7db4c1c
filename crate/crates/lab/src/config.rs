//! Experiment configs.
//!
//! A config file is a JSON object. Every key is optional except `env`;
//! unknown keys anywhere (including inside `agent`) are errors. The `agent`
//! object overrides individual fields of [`ScqConfig::desk`] for the chosen
//! environment, and `agent.schedule_steps` follows `n_iterations` unless set.

use std::path::{Path, PathBuf};

use scq_core::agent::ScqConfig;
use scq_core::baselines::{make_baseline, BaselineKind};
use scq_core::env::{Behavior, EnvKind};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use sha2::{Digest, Sha256};

use crate::{LabError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Scq,
    Cql,
    SacAlpha0,
    ScqLayernorm,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Scq, Method::Cql, Method::SacAlpha0, Method::ScqLayernorm];

    pub fn tag(self) -> &'static str {
        match self {
            Method::Scq => "scq",
            Method::Cql => "cql",
            Method::SacAlpha0 => "sac_alpha0",
            Method::ScqLayernorm => "scq_layernorm",
        }
    }

    pub fn from_tag(tag: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.tag() == tag)
            .ok_or_else(|| LabError::Config(format!("unknown method {tag:?}")))
    }

    fn baseline(self) -> Option<BaselineKind> {
        match self {
            Method::Scq => None,
            Method::Cql => Some(BaselineKind::Cql),
            Method::SacAlpha0 => Some(BaselineKind::SacAlpha0),
            Method::ScqLayernorm => Some(BaselineKind::ScqLayernorm),
        }
    }

    /// The training config this method runs with, derived from `base`.
    pub fn agent_config(self, base: &ScqConfig) -> ScqConfig {
        match self.baseline() {
            None => base.clone(),
            Some(kind) => make_baseline(kind, base),
        }
    }
}

pub const DEFAULT_ITERATIONS: u64 = 100_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub env: String,
    pub behavior: String,
    pub dataset_size: usize,
    pub dataset_seed: u64,
    /// Explicit dataset file; otherwise one is cached under `output_dir/datasets`.
    pub dataset_path: Option<PathBuf>,
    pub generate_dataset: bool,
    pub fraction: f64,
    pub method: Method,
    pub agent: ScqConfig,
    pub n_iterations: u64,
    pub eval_every: u64,
    pub n_eval_episodes: usize,
    pub seeds: Vec<u64>,
    pub output_dir: PathBuf,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    env: String,
    #[serde(default = "default_behavior")]
    behavior: String,
    #[serde(default = "default_size")]
    dataset_size: usize,
    #[serde(default)]
    dataset_seed: u64,
    #[serde(default)]
    dataset_path: Option<PathBuf>,
    #[serde(default = "yes")]
    generate_dataset: bool,
    #[serde(default = "one")]
    fraction: f64,
    #[serde(default = "default_method")]
    method: Method,
    #[serde(default)]
    agent: Map<String, Value>,
    #[serde(default = "default_iterations")]
    n_iterations: u64,
    #[serde(default = "default_eval_every")]
    eval_every: u64,
    #[serde(default = "default_episodes")]
    n_eval_episodes: usize,
    #[serde(default = "default_seeds")]
    seeds: Vec<u64>,
    #[serde(default = "default_output")]
    output_dir: PathBuf,
}

fn default_behavior() -> String {
    "medium".into()
}
fn default_size() -> usize {
    10_000
}
fn yes() -> bool {
    true
}
fn one() -> f64 {
    1.0
}
fn default_method() -> Method {
    Method::Scq
}
fn default_iterations() -> u64 {
    DEFAULT_ITERATIONS
}
fn default_eval_every() -> u64 {
    5_000
}
fn default_episodes() -> usize {
    10
}
fn default_seeds() -> Vec<u64> {
    vec![0]
}
fn default_output() -> PathBuf {
    PathBuf::from("runs")
}

fn config_err(e: impl std::fmt::Display) -> LabError {
    LabError::Config(e.to_string())
}

impl ExperimentConfig {
    /// Desk defaults for `env`: medium data, SCQ, one seed.
    pub fn desk(env: EnvKind) -> Self {
        let mut agent = ScqConfig::desk(env);
        agent.schedule_steps = DEFAULT_ITERATIONS;
        ExperimentConfig {
            env: env.name().into(),
            behavior: default_behavior(),
            dataset_size: default_size(),
            dataset_seed: 0,
            dataset_path: None,
            generate_dataset: true,
            fraction: 1.0,
            method: Method::Scq,
            agent,
            n_iterations: DEFAULT_ITERATIONS,
            eval_every: default_eval_every(),
            n_eval_episodes: default_episodes(),
            seeds: default_seeds(),
            output_dir: default_output(),
        }
    }

    /// Parse a config document and fill in defaults.
    pub fn from_json(text: &str) -> Result<Self> {
        let raw: RawConfig = serde_json::from_str(text).map_err(config_err)?;
        let env = EnvKind::from_name(&raw.env).map_err(config_err)?;
        let mut agent = serde_json::to_value(ScqConfig::desk(env))?;
        let fields = agent.as_object_mut().expect("ScqConfig serialises to an object");
        fields.insert("schedule_steps".into(), raw.n_iterations.into());
        for (k, v) in raw.agent {
            fields.insert(k, v);
        }
        let agent: ScqConfig = serde_json::from_value(agent).map_err(|e| config_err(format!("agent: {e}")))?;
        let cfg = ExperimentConfig {
            env: raw.env,
            behavior: raw.behavior,
            dataset_size: raw.dataset_size,
            dataset_seed: raw.dataset_seed,
            dataset_path: raw.dataset_path,
            generate_dataset: raw.generate_dataset,
            fraction: raw.fraction,
            method: raw.method,
            agent,
            n_iterations: raw.n_iterations,
            eval_every: raw.eval_every,
            n_eval_episodes: raw.n_eval_episodes,
            seeds: raw.seeds,
            output_dir: raw.output_dir,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| config_err(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        EnvKind::from_name(&self.env).map_err(config_err)?;
        Behavior::from_label(&self.behavior).map_err(config_err)?;
        if self.seeds.is_empty() {
            return Err(config_err("seeds must not be empty"));
        }
        if !(self.fraction > 0.0 && self.fraction <= 1.0) {
            return Err(config_err(format!("fraction must lie in (0, 1], got {}", self.fraction)));
        }
        if self.n_iterations == 0 || self.eval_every == 0 || self.n_eval_episodes == 0 {
            return Err(config_err("n_iterations, eval_every and n_eval_episodes must be positive"));
        }
        if self.dataset_size == 0 {
            return Err(config_err("dataset_size must be positive"));
        }
        self.agent.validate().map_err(config_err)
    }

    pub fn env_kind(&self) -> Result<EnvKind> {
        EnvKind::from_name(&self.env).map_err(config_err)
    }

    pub fn behavior_kind(&self) -> Result<Behavior> {
        Behavior::from_label(&self.behavior).map_err(config_err)
    }

    /// `env-behavior`, e.g. `point-maze-medium`.
    pub fn task(&self) -> String {
        format!("{}-{}", self.env, self.behavior)
    }

    /// Training config for one seed.
    pub fn agent_for_seed(&self, seed: u64) -> ScqConfig {
        let mut c = self.method.agent_config(&self.agent);
        c.seed = seed;
        c
    }

    /// Hex SHA-256 of the canonical (compact, field-ordered) JSON form.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serialises");
        hex::encode(Sha256::digest(&bytes))
    }

    pub fn to_json_pretty(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("config serialises");
        s.push('\n');
        s
    }
}
