use std::fs;
use std::path::Path;

use proptest::prelude::*;
use scq_lab::config::{ExperimentConfig, Method};
use scq_lab::experiment::{aggregate, run_alpha_sweep, run_experiment, run_fraction_study, ResultTable};
use scq_lab::metrics::MetricsFile;
use scq_lab::LabError;

fn tiny(dir: &Path, env: &str, seeds: &[u64]) -> ExperimentConfig {
    let doc = serde_json::json!({
        "env": env,
        "dataset_size": 300,
        "n_iterations": 120,
        "eval_every": 40,
        "n_eval_episodes": 2,
        "seeds": seeds,
        "output_dir": dir,
        "agent": {
            "actor_hidden": [8, 8],
            "critic_hidden": [8, 8],
            "cvae_hidden": 16,
            "batch_size": 16,
            "warmup_iters": 30
        }
    });
    ExperimentConfig::from_json(&doc.to_string()).unwrap()
}

#[test]
fn single_seed_writes_self_describing_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path(), "line-bandit", &[4]);
    let out = run_experiment(&cfg).unwrap();
    assert_eq!(out.row.std, 0.0);
    assert_eq!(out.row.n_seeds, 1);
    assert_eq!(out.row.mean, out.runs[0].score);
    let m = MetricsFile::read(&dir.path().join("metrics/scq_seed4.csv")).unwrap();
    assert_eq!(m.get("config_hash"), Some(cfg.hash().as_str()));
    assert_eq!(m.get("seeds"), Some("4"));
    assert_eq!(m.column("iteration").unwrap(), vec![39.0, 79.0, 119.0]);
    let results = fs::read_to_string(dir.path().join("results.csv")).unwrap();
    assert!(results.starts_with(&format!("# config_hash={}\n# seeds=4\n", cfg.hash())));
    assert_eq!(ResultTable::from_csv(&results).unwrap().rows, vec![out.row.clone()]);
    for f in ["config.json", "summary.json", "checkpoints/scq_seed4/manifest.json", "checkpoints/scq_seed4/tensors.bin"] {
        assert!(dir.path().join(f).is_file(), "{f}");
    }
    let saved = ExperimentConfig::load(&dir.path().join("config.json")).unwrap();
    assert_eq!(saved, cfg);
}

#[test]
fn score_is_the_mean_of_the_last_ten_evaluations() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny(dir.path(), "line-bandit", &[0]);
    cfg.eval_every = 10;
    let out = run_experiment(&cfg).unwrap();
    let scores = out.runs[0].metrics.as_ref().unwrap().column("normalized_score").unwrap();
    assert_eq!(scores.len(), 12);
    let tail = &scores[2..];
    assert_eq!(out.runs[0].score, tail.iter().sum::<f64>() / 10.0);
}

#[test]
fn two_seeds_give_two_files_and_one_row() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path(), "point-maze", &[1, 0]);
    let out = run_experiment(&cfg).unwrap();
    assert_eq!(out.runs.iter().map(|r| r.seed).collect::<Vec<_>>(), vec![1, 0]);
    let a = fs::read(dir.path().join("metrics/scq_seed0.csv")).unwrap();
    let b = fs::read(dir.path().join("metrics/scq_seed1.csv")).unwrap();
    assert_ne!(a, b);
    let table = ResultTable::from_csv(&fs::read_to_string(dir.path().join("results.csv")).unwrap()).unwrap();
    assert_eq!(table.rows.len(), 1);
    assert_eq!(table.rows[0].n_seeds, 2);
    let expect = aggregate("point-maze-medium", "scq", &[out.runs[0].score, out.runs[1].score]);
    assert_eq!(table.rows[0], expect);
}

#[test]
fn rerun_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path(), "point-maze", &[0, 1]);
    let files = ["results.csv", "summary.json", "metrics/scq_seed0.csv", "metrics/scq_seed1.csv", "checkpoints/scq_seed1/tensors.bin"];
    run_experiment(&cfg).unwrap();
    let first: Vec<Vec<u8>> = files.iter().map(|f| fs::read(dir.path().join(f)).unwrap()).collect();
    // second run reuses the cached dataset
    run_experiment(&cfg).unwrap();
    for (f, before) in files.iter().zip(first) {
        assert_eq!(fs::read(dir.path().join(f)).unwrap(), before, "{f}");
    }
}

#[test]
fn missing_dataset_without_generation_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny(dir.path(), "line-bandit", &[0]);
    cfg.generate_dataset = false;
    assert!(matches!(run_experiment(&cfg), Err(LabError::MissingDataset(_))));
    cfg.dataset_path = Some(dir.path().join("nowhere.scqd"));
    assert!(matches!(run_experiment(&cfg), Err(LabError::MissingDataset(_))));
}

#[test]
fn zero_alpha_sweep_matches_the_sac_baseline() {
    let dir = tempfile::tempdir().unwrap();
    let base = tiny(&dir.path().join("sweep"), "line-bandit", &[0, 1]);
    let sweep = run_alpha_sweep(&base, &[0.0]).unwrap();
    let sac = run_experiment(&ExperimentConfig { method: Method::SacAlpha0, output_dir: dir.path().join("sac"), ..base }).unwrap();
    let (a, b) = (&sweep[0].outcome.row, &sac.row);
    assert_eq!((a.mean, a.std, a.n_seeds), (b.mean, b.std, b.n_seeds));
    for (x, y) in sweep[0].outcome.runs.iter().zip(&sac.runs) {
        assert_eq!(x.final_mean_q, y.final_mean_q);
    }
}

#[test]
fn duplicate_alphas_are_kept() {
    let dir = tempfile::tempdir().unwrap();
    let base = tiny(dir.path(), "line-bandit", &[0]);
    let sweep = run_alpha_sweep(&base, &[1.0, 1.0]).unwrap();
    assert_eq!(sweep.len(), 2);
    assert_eq!(sweep[0].outcome.row.mean, sweep[1].outcome.row.mean);
    let table = ResultTable::from_csv(&fs::read_to_string(dir.path().join("results.csv")).unwrap()).unwrap();
    assert_eq!(table.rows.len(), 2);
    for i in 0..2 {
        let curve = fs::read_to_string(dir.path().join(format!("q_curves/alpha{i}.csv"))).unwrap();
        assert!(curve.starts_with("# alpha=1\niteration,mean_q\n"));
        assert_eq!(curve.lines().count(), 5);
    }
    assert!(matches!(run_alpha_sweep(&base, &[]), Err(LabError::Config(_))));
}

#[test]
fn fraction_grid_shape_and_full_fraction_match() {
    let dir = tempfile::tempdir().unwrap();
    let base = tiny(&dir.path().join("grid"), "line-bandit", &[0]);
    let grid = run_fraction_study(&base, &[1.0, 0.5]).unwrap();
    assert_eq!(grid.len(), 4);
    let keys: Vec<(f64, &str)> = grid.iter().map(|p| (p.fraction, p.method.as_str())).collect();
    assert_eq!(keys, vec![(1.0, "scq"), (1.0, "scq_layernorm"), (0.5, "scq"), (0.5, "scq_layernorm")]);
    let table = ResultTable::from_csv(&fs::read_to_string(dir.path().join("grid/results.csv")).unwrap()).unwrap();
    assert_eq!(table.rows.len(), 4);
    let plain = run_experiment(&ExperimentConfig { output_dir: dir.path().join("plain"), ..base.clone() }).unwrap();
    assert_eq!(grid[0].outcome.row.mean, plain.row.mean);
    // a rerun reproduces the grid
    let again = run_fraction_study(&base, &[1.0, 0.5]).unwrap();
    assert_eq!(
        grid.iter().map(|p| p.outcome.row.clone()).collect::<Vec<_>>(),
        again.iter().map(|p| p.outcome.row.clone()).collect::<Vec<_>>()
    );
}

proptest! {
    // scores on a 1/1024 grid give an exact integer oracle
    #[test]
    fn aggregation_matches_exact_arithmetic(ks in prop::collection::vec(-1_000_000i64..1_000_000, 1..40)) {
        let scores: Vec<f64> = ks.iter().map(|&k| k as f64 / 1024.0).collect();
        let row = aggregate("t", "m", &scores);
        let n = ks.len() as i128;
        let s: i128 = ks.iter().map(|&k| k as i128).sum();
        let ss: i128 = ks.iter().map(|&k| (k as i128) * (k as i128)).sum();
        let mean = s as f64 / (1024.0 * n as f64);
        let var = (n * ss - s * s) as f64 / (1024.0 * 1024.0 * (n * n) as f64);
        prop_assert!((row.mean - mean).abs() <= 1e-12 * mean.abs().max(1.0));
        prop_assert!((row.std - var.sqrt()).abs() <= 1e-12 * var.sqrt().max(1.0));
        prop_assert_eq!(row.n_seeds, ks.len());
        if ks.len() == 1 {
            prop_assert_eq!(row.std, 0.0);
        }
    }
}
