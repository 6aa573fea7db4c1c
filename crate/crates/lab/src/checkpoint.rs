//! Agent checkpoints: `manifest.json` plus `tensors.bin`.
//!
//! The manifest carries the architecture, optimiser steps, the schedule,
//! `log λ` and the OOD threshold. `tensors.bin` holds every parameter and
//! moment vector as `u64 count` followed by little-endian `f32` values, in
//! the order listed under `tensors` in the manifest.
//!
//! Values are stored at `f32` precision, so a reloaded agent acts like the
//! original but is not bit-identical to it.

use std::path::Path;

use scq_core::agent::{AgentState, ScqConfig};
use scq_core::cvae::{Cvae, OodThreshold};
use scq_core::nn::{Adam, Bounds, LrSchedule, Mlp, MlpSpec, ScheduleKind};
use serde::{Deserialize, Serialize};

use crate::{fsutil, LabError, Result};

pub const FORMAT: &str = "scq-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub len: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerEntry {
    pub name: String,
    pub lr: f64,
    pub step: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CvaeEntry {
    pub latent_dim: usize,
    pub kl_weight: f64,
    pub encoder: MlpSpec,
    pub decoder: MlpSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub step: u64,
    /// Tag of the method that produced the agent (`scq`, `cql`, ...).
    pub method: String,
    pub config_hash: String,
    pub state_dim: usize,
    pub bounds: Vec<Bounds>,
    pub actor: MlpSpec,
    pub critic: MlpSpec,
    pub cvae: Option<CvaeEntry>,
    pub log_lambda: f64,
    pub threshold: OodThreshold,
    pub schedule: LrSchedule,
    pub optimizers: Vec<OptimizerEntry>,
    pub tensors: Vec<TensorEntry>,
}

fn adam_parts<'a>(name: &str, opt: &'a Adam, out: &mut Vec<(String, &'a [f64])>, opts: &mut Vec<OptimizerEntry>) {
    let (m, v) = opt.moments();
    out.push((format!("{name}.m"), m));
    out.push((format!("{name}.v"), v));
    opts.push(OptimizerEntry { name: name.into(), lr: opt.lr, step: opt.step });
}

/// Manifest and tensor bytes for `agent`.
pub fn encode(agent: &AgentState, cfg: &ScqConfig, method: &str, config_hash: &str) -> Result<(Vec<u8>, Vec<u8>)> {
    let mut tensors: Vec<(String, &[f64])> = vec![
        ("actor".into(), agent.actor.params()),
        ("critic_a".into(), agent.critic_a.params()),
        ("critic_b".into(), agent.critic_b.params()),
        ("target_a".into(), agent.target_a.params()),
        ("target_b".into(), agent.target_b.params()),
    ];
    let mut optimizers = Vec::new();
    adam_parts("actor_opt", &agent.actor_opt, &mut tensors, &mut optimizers);
    adam_parts("critic_a_opt", &agent.critic_a_opt, &mut tensors, &mut optimizers);
    adam_parts("critic_b_opt", &agent.critic_b_opt, &mut tensors, &mut optimizers);
    adam_parts("lambda_opt", &agent.lambda_opt, &mut tensors, &mut optimizers);
    let cvae = agent.cvae.as_ref().map(|c| {
        tensors.push(("cvae.encoder".into(), c.encoder.params()));
        tensors.push(("cvae.decoder".into(), c.decoder.params()));
        adam_parts("cvae.encoder_opt", &c.encoder_opt, &mut tensors, &mut optimizers);
        adam_parts("cvae.decoder_opt", &c.decoder_opt, &mut tensors, &mut optimizers);
        CvaeEntry {
            latent_dim: c.latent_dim,
            kl_weight: c.kl_weight,
            encoder: c.encoder.spec().clone(),
            decoder: c.decoder.spec().clone(),
        }
    });
    let schedule = match cfg.actor_schedule {
        ScheduleKind::Constant => LrSchedule::constant(cfg.actor_lr),
        ScheduleKind::Cosine => LrSchedule::cosine(cfg.actor_lr, cfg.schedule_steps),
    };
    let manifest = Manifest {
        format: FORMAT.into(),
        version: VERSION,
        step: agent.iteration,
        method: method.into(),
        config_hash: config_hash.into(),
        state_dim: agent.state_dim,
        bounds: agent.bounds.clone(),
        actor: agent.actor.spec().clone(),
        critic: agent.critic_a.spec().clone(),
        cvae,
        log_lambda: agent.log_lambda,
        threshold: agent.threshold,
        schedule,
        optimizers,
        tensors: tensors.iter().map(|(n, t)| TensorEntry { name: n.clone(), len: t.len() }).collect(),
    };
    let mut bin = Vec::new();
    for (_, t) in &tensors {
        bin.extend_from_slice(&(t.len() as u64).to_le_bytes());
        for &x in t.iter() {
            bin.extend_from_slice(&(x as f32).to_le_bytes());
        }
    }
    let mut json = serde_json::to_vec_pretty(&manifest)?;
    json.push(b'\n');
    Ok((json, bin))
}

pub fn save(dir: &Path, agent: &AgentState, cfg: &ScqConfig, method: &str, config_hash: &str) -> Result<()> {
    let (json, bin) = encode(agent, cfg, method, config_hash)?;
    // tensors first: a manifest on disk always points at complete tensors
    fsutil::atomic_write(&dir.join("tensors.bin"), &bin)?;
    fsutil::atomic_write(&dir.join("manifest.json"), &json)
}

fn split_tensors(manifest: &Manifest, bin: &[u8]) -> Result<Vec<Vec<f64>>> {
    let mut pos = 0;
    let mut out = Vec::with_capacity(manifest.tensors.len());
    for t in &manifest.tensors {
        let head = bin.get(pos..pos + 8).ok_or_else(|| LabError::Format(format!("tensor {}: truncated", t.name)))?;
        let n = u64::from_le_bytes(head.try_into().unwrap()) as usize;
        if n != t.len {
            return Err(LabError::Format(format!("tensor {}: {n} values, manifest says {}", t.name, t.len)));
        }
        pos += 8;
        let body = bin.get(pos..pos + 4 * n).ok_or_else(|| LabError::Format(format!("tensor {}: truncated", t.name)))?;
        out.push(body.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64).collect());
        pos += 4 * n;
    }
    if pos != bin.len() {
        return Err(LabError::Format(format!("{} trailing tensor bytes", bin.len() - pos)));
    }
    Ok(out)
}

pub fn decode(manifest_json: &[u8], bin: &[u8]) -> Result<(Manifest, AgentState)> {
    let manifest: Manifest = serde_json::from_slice(manifest_json)?;
    if manifest.format != FORMAT || manifest.version != VERSION {
        return Err(LabError::Format(format!("unsupported checkpoint {} v{}", manifest.format, manifest.version)));
    }
    let mut tensors = split_tensors(&manifest, bin)?.into_iter();
    let mut next = |name: &str| -> Result<Vec<f64>> {
        tensors.next().ok_or_else(|| LabError::Format(format!("missing tensor {name}")))
    };
    let mut opts = manifest.optimizers.iter();
    let mut adam = |name: &str, m: Vec<f64>, v: Vec<f64>| -> Result<Adam> {
        let e = opts.next().filter(|e| e.name == name).ok_or_else(|| LabError::Format(format!("missing optimizer {name}")))?;
        Ok(Adam::from_parts(e.lr, e.step, m, v)?)
    };
    let mlp = |spec: &MlpSpec, p: Vec<f64>| -> Result<Mlp> { Ok(Mlp::from_params(spec.clone(), p)?) };

    let actor = mlp(&manifest.actor, next("actor")?)?;
    let critic_a = mlp(&manifest.critic, next("critic_a")?)?;
    let critic_b = mlp(&manifest.critic, next("critic_b")?)?;
    let target_a = mlp(&manifest.critic, next("target_a")?)?;
    let target_b = mlp(&manifest.critic, next("target_b")?)?;
    let actor_opt = adam("actor_opt", next("actor_opt.m")?, next("actor_opt.v")?)?;
    let critic_a_opt = adam("critic_a_opt", next("critic_a_opt.m")?, next("critic_a_opt.v")?)?;
    let critic_b_opt = adam("critic_b_opt", next("critic_b_opt.m")?, next("critic_b_opt.v")?)?;
    let lambda_opt = adam("lambda_opt", next("lambda_opt.m")?, next("lambda_opt.v")?)?;
    let cvae = match &manifest.cvae {
        None => None,
        Some(c) => {
            let encoder = mlp(&c.encoder, next("cvae.encoder")?)?;
            let decoder = mlp(&c.decoder, next("cvae.decoder")?)?;
            let encoder_opt = adam("cvae.encoder_opt", next("cvae.encoder_opt.m")?, next("cvae.encoder_opt.v")?)?;
            let decoder_opt = adam("cvae.decoder_opt", next("cvae.decoder_opt.m")?, next("cvae.decoder_opt.v")?)?;
            Some(Cvae {
                state_dim: manifest.state_dim,
                bounds: manifest.bounds.clone(),
                latent_dim: c.latent_dim,
                kl_weight: c.kl_weight,
                encoder,
                decoder,
                encoder_opt,
                decoder_opt,
            })
        }
    };
    let agent = AgentState {
        state_dim: manifest.state_dim,
        bounds: manifest.bounds.clone(),
        actor,
        critic_a,
        critic_b,
        target_a,
        target_b,
        log_lambda: manifest.log_lambda,
        actor_opt,
        critic_a_opt,
        critic_b_opt,
        lambda_opt,
        cvae,
        threshold: manifest.threshold,
        iteration: manifest.step,
    };
    Ok((manifest, agent))
}

pub fn load(dir: &Path) -> Result<(Manifest, AgentState)> {
    decode(&std::fs::read(dir.join("manifest.json"))?, &std::fs::read(dir.join("tensors.bin"))?)
}
