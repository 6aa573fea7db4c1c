use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use scq_core::agent::evaluate_policy;
use scq_core::env::{generate_dataset, normalized_score, Behavior, EnvKind, ScoreScale};
use scq_lab::config::{ExperimentConfig, Method};
use scq_lab::experiment::{run_alpha_sweep, run_experiment, run_fraction_study, ResultTable};
use scq_lab::fsutil::{atomic_write, resolve_output, OUTPUT_ROOT_VAR};
use scq_lab::verify::{verify_linear, VerifyLinearConfig};
use scq_lab::{checkpoint, dataset_io, plot, LabError, Result};

/// Offline RL experiments with strategically conservative critics.
#[derive(Parser)]
#[command(name = "scq", version)]
struct Cli {
    /// Root that relative output paths are resolved against.
    #[arg(long, global = true, env = OUTPUT_ROOT_VAR)]
    output_root: Option<PathBuf>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a dataset with a scripted behaviour policy.
    GenData {
        #[arg(long)]
        env: String,
        #[arg(long, default_value = "medium")]
        behavior: String,
        #[arg(long, default_value_t = 10_000)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Also write a CSV copy next to the binary file.
        #[arg(long)]
        csv: bool,
    },
    /// Train every seed of a config.
    Train {
        config: PathBuf,
        #[arg(long)]
        method: Option<String>,
        /// Comma-separated seeds overriding the config.
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
    },
    /// Evaluate a checkpoint.
    Eval {
        checkpoint: PathBuf,
        #[arg(long)]
        env: String,
        #[arg(long, default_value_t = 10)]
        episodes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Check the linear-MDP guarantees on random instances.
    VerifyLinear {
        #[arg(long, default_value_t = 100)]
        n_instances: usize,
        #[arg(long, default_value_t = 0.5)]
        d_fraction: f64,
        #[arg(long, default_value_t = 5)]
        k_iters: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Write the JSON summary here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train SCQ at each α.
    SweepAlpha {
        config: PathBuf,
        #[arg(long, value_delimiter = ',', default_values_t = [0.0, 0.1, 1.0, 10.0])]
        alphas: Vec<f64>,
    },
    /// Train SCQ and the layer-norm baseline on dataset fractions.
    FractionStudy {
        config: PathBuf,
        #[arg(long, value_delimiter = ',', default_values_t = [1.0, 0.5, 0.3, 0.1])]
        fractions: Vec<f64>,
    },
    /// Merge `results.csv` files into one markdown table.
    Report {
        #[arg(required = true)]
        dirs: Vec<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Render learning curves from the metrics under a run directory.
    Plot {
        dir: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn load_config(path: &Path) -> Result<ExperimentConfig> {
    ExperimentConfig::load(path)
}

fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => atomic_write(&resolve_output(p), text.as_bytes()),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn config_err(e: impl std::fmt::Display) -> LabError {
    LabError::Config(e.to_string())
}

fn run(cmd: Cmd) -> Result<()> {
    match cmd {
        Cmd::GenData { env, behavior, size, seed, out, csv } => {
            let env = EnvKind::from_name(&env).map_err(config_err)?;
            let behavior = Behavior::from_label(&behavior).map_err(config_err)?;
            let ds = generate_dataset(env, behavior, size, seed)?;
            let path = resolve_output(&out);
            dataset_io::write(&path, &ds)?;
            if csv {
                atomic_write(&path.with_extension("csv"), dataset_io::to_csv(&ds).as_bytes())?;
            }
            println!("{} transitions -> {}", ds.len(), path.display());
        }
        Cmd::Train { config, method, seeds } => {
            let mut cfg = load_config(&config)?;
            if let Some(m) = method {
                cfg.method = Method::from_tag(&m)?;
            }
            if let Some(s) = seeds {
                cfg.seeds = s;
            }
            let outcome = run_experiment(&cfg)?;
            print!("{}", ResultTable { rows: vec![outcome.row] }.to_markdown());
        }
        Cmd::Eval { checkpoint, env, episodes, seed } => {
            let env = EnvKind::from_name(&env).map_err(config_err)?;
            let (manifest, agent) = checkpoint::load(&resolve_output(&checkpoint))?;
            let stats = evaluate_policy(&agent, env, episodes, seed)?;
            let score = normalized_score(&ScoreScale::for_env(env), stats.mean_return);
            println!("{} step {}: return {:.3}, normalized score {:.2}", manifest.method, manifest.step, stats.mean_return, score);
        }
        Cmd::VerifyLinear { n_instances, d_fraction, k_iters, seed, out } => {
            let summary = verify_linear(&VerifyLinearConfig::new(n_instances, d_fraction, k_iters, seed))?;
            let mut text = serde_json::to_string_pretty(&summary)?;
            text.push('\n');
            emit(out.as_deref(), &text)?;
            if !summary.all_passed {
                return Err(LabError::Verification(format!(
                    "{} pointwise and {} ordering failures",
                    summary.pointwise.failed, summary.ordering.failed
                )));
            }
        }
        Cmd::SweepAlpha { config, alphas } => {
            let points = run_alpha_sweep(&load_config(&config)?, &alphas)?;
            for p in points {
                println!("alpha {}: score {:.2} ± {:.2}", p.alpha, p.outcome.row.mean, p.outcome.row.std);
            }
        }
        Cmd::FractionStudy { config, fractions } => {
            let points = run_fraction_study(&load_config(&config)?, &fractions)?;
            for p in points {
                println!("fraction {} {}: score {:.2} ± {:.2}", p.fraction, p.method, p.outcome.row.mean, p.outcome.row.std);
            }
        }
        Cmd::Report { dirs, out } => {
            let mut table = ResultTable::default();
            for d in dirs {
                let text = std::fs::read_to_string(resolve_output(&d).join("results.csv"))?;
                table.rows.extend(ResultTable::from_csv(&text)?.rows);
            }
            emit(out.as_deref(), &table.to_markdown())?;
        }
        Cmd::Plot { dir, out } => {
            let dir = resolve_output(&dir);
            let files = plot::collect_metrics(&dir)?;
            let target = out.map_or_else(|| dir.join("plots"), |o| resolve_output(&o));
            for p in plot::write_plots(&target, &files)? {
                println!("{}", p.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    if let Some(root) = &cli.output_root {
        std::env::set_var(OUTPUT_ROOT_VAR, root);
    }
    match run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e {
                LabError::Config(_) => 2,
                LabError::Verification(_) => 3,
                _ => 1,
            })
        }
    }
}
