//! Seed sweeps and the studies built on them.
//!
//! [`run_experiment`] trains one agent per seed (seeds run on scoped threads,
//! results are always ordered by seed), evaluates every `eval_every`
//! iterations and writes under the resolved output directory:
//!
//! - `config.json`: the resolved config;
//! - `metrics/{method}_seed{seed}.csv`: one row per evaluation;
//! - `checkpoints/{method}_seed{seed}/`: the final agent;
//! - `results.csv` and `summary.json`.
//!
//! A run's score is the mean normalised score of its last ten evaluations.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use log::info;
use scq_core::agent::{evaluate_policy, train_iteration, AgentState, TrainingData};
use scq_core::env::{generate_dataset, normalized_score, subsample, Dataset, ScoreScale};
use scq_core::stats::mean_std;
use serde::{Deserialize, Serialize};

use crate::config::{ExperimentConfig, Method};
use crate::metrics::{seed_list, MetricsFile};
use crate::{checkpoint, dataset_io, fsutil, LabError, Result};

/// Evaluations averaged into a run's score.
pub const SCORE_WINDOW: usize = 10;
/// Iterations averaged into the final Q statistics.
pub const Q_WINDOW: u64 = 1000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedRun {
    pub seed: u64,
    pub score: f64,
    pub final_mean_q: f64,
    pub final_mean_abs_q: f64,
    /// `max|r|/(1−γ)` of the training data.
    pub return_scale: f64,
    #[serde(skip)]
    pub metrics: Option<MetricsFile>,
}

impl SeedRun {
    pub fn diverged(&self, factor: f64) -> bool {
        !self.final_mean_abs_q.is_finite() || self.final_mean_abs_q > factor * self.return_scale
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub task: String,
    pub method: String,
    pub mean: f64,
    /// Population standard deviation; 0 for a single seed.
    pub std: f64,
    pub n_seeds: usize,
}

pub fn aggregate(task: &str, method: &str, scores: &[f64]) -> ResultRow {
    let (mean, std) = mean_std(scores);
    ResultRow { task: task.into(), method: method.into(), mean, std, n_seeds: scores.len() }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ResultTable {
    pub rows: Vec<ResultRow>,
}

impl ResultTable {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("task,method,mean,std,n_seeds\n");
        for r in &self.rows {
            let _ = writeln!(out, "{},{},{},{},{}", r.task, r.method, r.mean, r.std, r.n_seeds);
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.starts_with('#'));
        match lines.next() {
            Some("task,method,mean,std,n_seeds") => {}
            other => return Err(LabError::Format(format!("unexpected results header {other:?}"))),
        }
        let bad = |l: &str| LabError::Format(format!("bad results row {l:?}"));
        let rows = lines
            .map(|l| {
                let f: Vec<&str> = l.split(',').collect();
                if f.len() != 5 {
                    return Err(bad(l));
                }
                Ok(ResultRow {
                    task: f[0].into(),
                    method: f[1].into(),
                    mean: f[2].parse().map_err(|_| bad(l))?,
                    std: f[3].parse().map_err(|_| bad(l))?,
                    n_seeds: f[4].parse().map_err(|_| bad(l))?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(ResultTable { rows })
    }

    pub fn to_markdown(&self) -> String {
        let mut out = String::from("| task | method | score | seeds |\n|---|---|---|---|\n");
        for r in &self.rows {
            let _ = writeln!(out, "| {} | {} | {:.1} ± {:.1} | {} |", r.task, r.method, r.mean, r.std, r.n_seeds);
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentOutcome {
    pub config_hash: String,
    pub task: String,
    pub method: String,
    pub output_dir: PathBuf,
    pub row: ResultRow,
    pub runs: Vec<SeedRun>,
}

/// Where the dataset for `cfg` lives (or will be cached).
pub fn dataset_file(cfg: &ExperimentConfig) -> PathBuf {
    match &cfg.dataset_path {
        Some(p) => fsutil::resolve_output(p),
        None => fsutil::resolve_output(&cfg.output_dir)
            .join("datasets")
            .join(format!("{}-n{}-s{}.scqd", cfg.task(), cfg.dataset_size, cfg.dataset_seed)),
    }
}

/// Load the configured dataset, generating and caching it when allowed, then
/// subsample it to `cfg.fraction`.
pub fn load_dataset(cfg: &ExperimentConfig) -> Result<Dataset> {
    let path = dataset_file(cfg);
    let full = if path.exists() {
        dataset_io::read(&path)?
    } else if cfg.generate_dataset {
        let ds = generate_dataset(cfg.env_kind()?, cfg.behavior_kind()?, cfg.dataset_size, cfg.dataset_seed)?;
        dataset_io::write(&path, &ds)?;
        info!("generated {} transitions into {}", ds.len(), path.display());
        ds
    } else {
        return Err(LabError::MissingDataset(path));
    };
    if cfg.fraction < 1.0 {
        Ok(subsample(&full, cfg.fraction, cfg.dataset_seed)?)
    } else {
        Ok(full)
    }
}

fn eval_seed(seed: u64, iteration: u64) -> u64 {
    seed.rotate_left(32) ^ iteration
}

fn header(cfg: &ExperimentConfig, hash: &str, seed: u64) -> BTreeMap<String, String> {
    BTreeMap::from([
        ("config_hash".to_string(), hash.to_string()),
        ("task".to_string(), cfg.task()),
        ("method".to_string(), cfg.method.tag().to_string()),
        ("seed".to_string(), seed.to_string()),
        ("seeds".to_string(), seed_list(&cfg.seeds)),
    ])
}

/// Train and evaluate one seed; returns the run and the final agent.
pub fn train_seed(cfg: &ExperimentConfig, data: &TrainingData, seed: u64, hash: &str) -> Result<(SeedRun, AgentState)> {
    let env = cfg.env_kind()?;
    let scale = ScoreScale::for_env(env);
    let acfg = cfg.agent_for_seed(seed);
    let mut agent = AgentState::for_env(env, &acfg)?;
    let mut file = MetricsFile::new(header(cfg, hash, seed));
    let mut scores = Vec::new();
    let window_start = cfg.n_iterations.saturating_sub(Q_WINDOW);
    let (mut q_sum, mut abs_q_sum, mut q_n) = (0.0, 0.0, 0u64);
    for k in 0..cfg.n_iterations {
        let m = train_iteration(&mut agent, data, &acfg)?;
        if k >= window_start {
            q_sum += m.mean_q;
            abs_q_sum += m.mean_abs_q;
            q_n += 1;
        }
        if (k + 1) % cfg.eval_every == 0 || k + 1 == cfg.n_iterations {
            let stats = evaluate_policy(&agent, env, cfg.n_eval_episodes, eval_seed(seed, k + 1))?;
            let score = normalized_score(&scale, stats.mean_return);
            file.push(&m, stats.mean_return, score);
            scores.push(score);
        }
    }
    let tail = &scores[scores.len().saturating_sub(SCORE_WINDOW)..];
    let run = SeedRun {
        seed,
        score: tail.iter().sum::<f64>() / tail.len() as f64,
        final_mean_q: q_sum / q_n as f64,
        final_mean_abs_q: abs_q_sum / q_n as f64,
        return_scale: data.return_scale(acfg.discount),
        metrics: Some(file),
    };
    Ok((run, agent))
}

fn parallel_map<T: Send>(n: usize, f: impl Fn(usize) -> Result<T> + Sync) -> Result<Vec<T>> {
    let workers = std::thread::available_parallelism().map_or(1, |p| p.get()).min(n).max(1);
    let mut slots: Vec<Option<Result<T>>> = (0..n).map(|_| None).collect();
    std::thread::scope(|s| {
        let handles: Vec<_> = (0..workers)
            .map(|w| {
                let f = &f;
                s.spawn(move || (w..n).step_by(workers).map(|i| (i, f(i))).collect::<Vec<_>>())
            })
            .collect();
        for h in handles {
            for (i, r) in h.join().expect("worker thread panicked") {
                slots[i] = Some(r);
            }
        }
    });
    slots.into_iter().map(|s| s.expect("every index visited")).collect()
}

/// Train every seed of `cfg` and write its outputs.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentOutcome> {
    cfg.validate()?;
    let out = fsutil::resolve_output(&cfg.output_dir);
    let hash = cfg.hash();
    let data = TrainingData::from_dataset(&load_dataset(cfg)?)?;
    fsutil::atomic_write(&out.join("config.json"), cfg.to_json_pretty().as_bytes())?;
    let method = cfg.method.tag();
    let runs = parallel_map(cfg.seeds.len(), |i| {
        let seed = cfg.seeds[i];
        let (run, agent) = train_seed(cfg, &data, seed, &hash)?;
        let name = format!("{method}_seed{seed}");
        run.metrics.as_ref().expect("fresh run has metrics").write(&out.join("metrics").join(format!("{name}.csv")))?;
        checkpoint::save(&out.join("checkpoints").join(&name), &agent, &cfg.agent_for_seed(seed), method, &hash)?;
        info!("{} {method} seed {seed}: score {:.2}, final |Q| {:.3}", cfg.task(), run.score, run.final_mean_abs_q);
        Ok(run)
    })?;
    let scores: Vec<f64> = runs.iter().map(|r| r.score).collect();
    let row = aggregate(&cfg.task(), method, &scores);
    let outcome = ExperimentOutcome {
        config_hash: hash.clone(),
        task: cfg.task(),
        method: method.into(),
        output_dir: out.clone(),
        row: row.clone(),
        runs,
    };
    write_table(&out, &ResultTable { rows: vec![row] }, &hash, &cfg.seeds)?;
    fsutil::atomic_write(&out.join("summary.json"), &pretty(&outcome)?)?;
    Ok(outcome)
}

fn pretty<T: Serialize>(v: &T) -> Result<Vec<u8>> {
    let mut s = serde_json::to_vec_pretty(v)?;
    s.push(b'\n');
    Ok(s)
}

fn write_table(dir: &Path, table: &ResultTable, hash: &str, seeds: &[u64]) -> Result<()> {
    let text = format!("# config_hash={hash}\n# seeds={}\n{}", seed_list(seeds), table.to_csv());
    fsutil::atomic_write(&dir.join("results.csv"), text.as_bytes())
}

fn sub_config(base: &ExperimentConfig, dir: String) -> Result<ExperimentConfig> {
    // every sub-run shares the base dataset file
    let mut c = base.clone();
    c.dataset_path = Some(dataset_file(base));
    c.output_dir = base.output_dir.join(dir);
    if !dataset_file(base).exists() {
        load_dataset(&ExperimentConfig { fraction: 1.0, ..base.clone() })?;
    }
    Ok(c)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlphaPoint {
    pub alpha: f64,
    pub outcome: ExperimentOutcome,
}

/// One SCQ experiment per α (duplicates allowed). Each point also writes
/// `q_curves/alpha{i}.csv` with the seed-mean `mean_q` per evaluation.
pub fn run_alpha_sweep(base: &ExperimentConfig, alphas: &[f64]) -> Result<Vec<AlphaPoint>> {
    if alphas.is_empty() {
        return Err(LabError::Config("alphas must not be empty".into()));
    }
    let out = fsutil::resolve_output(&base.output_dir);
    let mut points = Vec::with_capacity(alphas.len());
    let mut table = ResultTable::default();
    for (i, &alpha) in alphas.iter().enumerate() {
        let mut c = sub_config(base, format!("alpha{i}"))?;
        c.agent.alpha = alpha;
        let outcome = run_experiment(&c)?;
        write_q_curve(&out.join("q_curves").join(format!("alpha{i}.csv")), alpha, &outcome)?;
        let mut row = outcome.row.clone();
        row.method = format!("{}@alpha={alpha}", row.method);
        table.rows.push(row);
        points.push(AlphaPoint { alpha, outcome });
    }
    write_table(&out, &table, &base.hash(), &base.seeds)?;
    fsutil::atomic_write(&out.join("summary.json"), &pretty(&points)?)?;
    Ok(points)
}

fn write_q_curve(path: &Path, alpha: f64, outcome: &ExperimentOutcome) -> Result<()> {
    let files: Vec<&MetricsFile> = outcome.runs.iter().filter_map(|r| r.metrics.as_ref()).collect();
    let iters = files[0].column("iteration")?;
    let qs = files.iter().map(|f| f.column("mean_q")).collect::<Result<Vec<_>>>()?;
    let mut text = format!("# alpha={alpha}\niteration,mean_q\n");
    for (j, it) in iters.iter().enumerate() {
        let _ = writeln!(text, "{it},{}", qs.iter().map(|q| q[j]).sum::<f64>() / qs.len() as f64);
    }
    fsutil::atomic_write(path, text.as_bytes())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FractionPoint {
    pub fraction: f64,
    pub method: String,
    pub outcome: ExperimentOutcome,
}

pub const DEFAULT_FRACTIONS: [f64; 4] = [1.0, 0.5, 0.3, 0.1];
pub const FRACTION_METHODS: [Method; 2] = [Method::Scq, Method::ScqLayernorm];

/// SCQ and the layer-norm baseline on each dataset fraction.
pub fn run_fraction_study(base: &ExperimentConfig, fractions: &[f64]) -> Result<Vec<FractionPoint>> {
    if fractions.is_empty() {
        return Err(LabError::Config("fractions must not be empty".into()));
    }
    let out = fsutil::resolve_output(&base.output_dir);
    let mut points = Vec::new();
    let mut table = ResultTable::default();
    for (i, &fraction) in fractions.iter().enumerate() {
        for method in FRACTION_METHODS {
            let mut c = sub_config(base, format!("fraction{i}_{}", method.tag()))?;
            c.fraction = fraction;
            c.method = method;
            let outcome = run_experiment(&c)?;
            let mut row = outcome.row.clone();
            row.task = format!("{}@fraction={fraction}", row.task);
            table.rows.push(row);
            points.push(FractionPoint { fraction, method: method.tag().into(), outcome });
        }
    }
    write_table(&out, &table, &base.hash(), &base.seeds)?;
    fsutil::atomic_write(&out.join("summary.json"), &pretty(&points)?)?;
    Ok(points)
}
