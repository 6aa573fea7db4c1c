//! End-to-end acceptance checks, one PASS/FAIL line per criterion.
//!
//! Run a subset with `cargo test -p scq-lab --test acceptance -- 1 4 6`.

use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use rand::Rng as _;
use scq_core::agent::{actor_loss, critic_loss, AgentState, OodSampleResult, ScqConfig, TrainingData};
use scq_core::baselines::cql_critic_loss;
use scq_core::cvae::{is_ood, Cvae, CvaeConfig, OodThreshold};
use scq_core::env::{generate_dataset, Behavior, EnvKind};
use scq_core::linalg::{max_abs_diff, Matrix};
use scq_core::linear::{
    bellman_backup, compute_f_terms, lstdq_update, random_instance, true_q, InstanceConfig, LinearMdp, PolicyMatrix,
    DEFAULT_RIDGE,
};
use scq_core::nn::{central_difference, max_relative_error, Bounds, Mlp};
use scq_core::rng::{normal, stream};
use scq_lab::config::{ExperimentConfig, Method};
use scq_lab::experiment::{run_alpha_sweep, run_experiment, run_fraction_study, ExperimentOutcome, DEFAULT_FRACTIONS};
use scq_lab::verify::{verify_linear, VerifyLinearConfig};

type Check = Result<String, String>;

fn ensure(ok: bool, detail: String) -> Check {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn within(limit: Duration, started: Instant, detail: String) -> Check {
    let took = started.elapsed();
    ensure(took < limit, format!("{detail}; {:.1}s (limit {}s)", took.as_secs_f64(), limit.as_secs()))
}

// -- linear core --

fn pointwise_pessimism() -> Check {
    let t = Instant::now();
    let s = verify_linear(&VerifyLinearConfig::new(50, 0.5, 5, 0)).map_err(|e| e.to_string())?;
    let c = &s.pointwise;
    let worst = c.worst_violation.unwrap_or(f64::NEG_INFINITY);
    let detail = format!(
        "{} passed, {} failed, {} skipped, worst violation {worst:.3e}, worst masked {:.3e}",
        c.passed,
        c.failed,
        c.precondition_skipped,
        c.worst_masked_violation.unwrap_or(f64::NEG_INFINITY)
    );
    within(Duration::from_secs(60), t, detail.clone())
        .and_then(|d| ensure(c.passed == 50 && c.failed == 0 && worst <= 1e-8, d))
}

fn value_ordering() -> Check {
    let t = Instant::now();
    let s = verify_linear(&VerifyLinearConfig::new(50, 0.5, 5, 1000)).map_err(|e| e.to_string())?;
    let c = &s.ordering;
    let worst = c.worst_violation.unwrap_or(f64::NEG_INFINITY);
    let detail = format!("{} passed, {} failed, {} skipped, worst violation {worst:.3e}", c.passed, c.failed, c.precondition_skipped);
    within(Duration::from_secs(60), t, detail).and_then(|d| ensure(c.passed == 50 && c.failed == 0 && worst <= 1e-8, d))
}

fn penalty_decomposition() -> Check {
    let mut worst = 0.0f64;
    for draw in 0..100u64 {
        let mut cfg = InstanceConfig::half_rank(4, 3);
        cfg.mask_prob = (draw as f64 + 0.5) / 100.0;
        cfg.ood_every_state = false;
        let inst = random_instance(&cfg, 5000 + draw).map_err(|e| e.to_string())?;
        let t = compute_f_terms(&inst.mdp, &inst.dist, &inst.policy, &inst.mask, DEFAULT_RIDGE).map_err(|e| e.to_string())?;
        for s in 0..4 {
            worst = worst.max((t.f[s] - t.f_idd[s] - t.f_ood[s]).abs());
        }
    }
    ensure(worst <= 1e-10, format!("max |f − f_idd − f_ood| = {worst:.3e} over 100 draws"))
}

fn value_iteration(mdp: &LinearMdp, policy: &PolicyMatrix, iters: usize) -> Vec<f64> {
    let (ns, na) = (mdp.n_states(), mdp.n_actions());
    let (p, r) = (mdp.transitions(), mdp.rewards());
    let mut q = vec![0.0; ns * na];
    for _ in 0..iters {
        let v: Vec<f64> = (0..ns).map(|s| (0..na).map(|a| policy.prob(s, a) * q[s * na + a]).sum()).collect();
        q = (0..ns * na).map(|i| r[i] + mdp.discount() * (0..ns).map(|s2| p[(i, s2)] * v[s2]).sum::<f64>()).collect();
    }
    q
}

fn tabular_equivalence() -> Check {
    let (mut lstd, mut vi) = (0.0f64, 0.0f64);
    for seed in 0..10 {
        let mut cfg = InstanceConfig::half_rank(4, 3);
        cfg.feature_dim = 12;
        let inst = random_instance(&cfg, seed).map_err(|e| e.to_string())?;
        let q_prev: Vec<f64> = (0..12).map(|i| ((i + seed as usize) as f64 * 0.37).sin()).collect();
        let w = lstdq_update(&inst.mdp, &inst.dist, &inst.policy, &q_prev, 0.0).map_err(|e| e.to_string())?;
        let exact = bellman_backup(&inst.mdp, &inst.policy, &q_prev).map_err(|e| e.to_string())?;
        lstd = lstd.max(max_abs_diff(&w.q_values(&inst.mdp), &exact));
        let q = true_q(&inst.mdp, &inst.policy).map_err(|e| e.to_string())?;
        vi = vi.max(max_abs_diff(&q, &value_iteration(&inst.mdp, &inst.policy, 10_000)));
    }
    ensure(
        lstd <= 1e-10 && vi <= 1e-10,
        format!("one-hot LSTD-Q vs backup {lstd:.3e}, true_q vs value iteration {vi:.3e}"),
    )
}

// -- gradients --

fn tiny_agent_config() -> ScqConfig {
    let mut c = ScqConfig::desk(EnvKind::PointMaze);
    c.actor_hidden = vec![8, 8];
    c.critic_hidden = vec![8, 8];
    c.cvae_hidden = 16;
    c
}

fn perturbed(cfg: &ScqConfig, seed: u64) -> AgentState {
    let mut agent = AgentState::for_env(EnvKind::PointMaze, cfg).unwrap();
    let mut rng = stream(seed, 77);
    agent.actor.params_mut().iter_mut().for_each(|p| *p += 0.3 * normal(&mut rng));
    agent
}

fn noise(rows: usize, cols: usize, seed: u64) -> Matrix {
    let mut rng = stream(seed, 99);
    Matrix::from_fn(rows, cols, |_, _| normal(&mut rng))
}

fn fd_error(analytic: &[f64], params: &[f64], h: f64, f: impl Fn(&[f64]) -> f64) -> f64 {
    max_relative_error(analytic, &central_difference(f, params, h), 1e-6)
}

// small critic-gradient entries lose digits to cancellation at finer steps
const CRITIC_STEP: f64 = 1e-4;

fn gradient_suite() -> Check {
    let cfg = tiny_agent_config();
    let data = TrainingData::from_dataset(&generate_dataset(EnvKind::PointMaze, Behavior::Medium, 300, 2).unwrap())
        .map_err(|e| e.to_string())?;
    let mut worst = [0.0f64; 4];
    for seed in 0..10u64 {
        let agent = perturbed(&cfg, seed);
        let spec = agent.critic_a.spec().clone();
        let batch = data.batch(&(0..12).map(|i| (i * 13 + seed as usize * 5) % 300).collect::<Vec<_>>());
        let next_eps = noise(12, 2, seed);
        let ood = OodSampleResult {
            actions: Matrix::from_fn(12, 2, |r, j| ((r * 3 + j) as f64 * 0.37).sin() * 0.9),
            found_mask: (0..12).map(|r| (r + seed as usize) % 3 != 0).collect(),
            fallback_distances: vec![0.0; 12],
            draws: vec![1; 12],
        };
        let with_critic = |a: Option<&[f64]>, b: Option<&[f64]>| {
            let mut g = agent.clone();
            if let Some(p) = a {
                g.critic_a = Mlp::from_params(spec.clone(), p.to_vec()).unwrap();
            }
            if let Some(p) = b {
                g.critic_b = Mlp::from_params(spec.clone(), p.to_vec()).unwrap();
            }
            g
        };

        let out = critic_loss(&batch, &ood, &agent, &cfg, 0.5, &next_eps).unwrap();
        let loss = |g: &AgentState| critic_loss(&batch, &ood, g, &cfg, 0.5, &next_eps).unwrap().loss;
        worst[0] = worst[0]
            .max(fd_error(&out.grads_a, agent.critic_a.params(), CRITIC_STEP, |p| loss(&with_critic(Some(p), None))))
            .max(fd_error(&out.grads_b, agent.critic_b.params(), CRITIC_STEP, |p| loss(&with_critic(None, Some(p)))));

        let eps = noise(12, 2, seed + 20);
        let act = actor_loss(&batch.states, &batch.actions, &eps, &agent, 0.2, 0.7).unwrap();
        let aspec = agent.actor.spec().clone();
        worst[1] = worst[1].max(fd_error(&act.grads, agent.actor.params(), 1e-6, |p| {
            let mut g = agent.clone();
            g.actor = Mlp::from_params(aspec.clone(), p.to_vec()).unwrap();
            actor_loss(&batch.states, &batch.actions, &eps, &g, 0.2, 0.7).unwrap().loss
        }));

        let pol = noise(12, 2, seed + 40);
        let cql = cql_critic_loss(&batch, &agent, &cfg, 0.7, &pol, &next_eps).unwrap();
        let closs = |g: &AgentState| cql_critic_loss(&batch, g, &cfg, 0.7, &pol, &next_eps).unwrap().loss;
        worst[2] = worst[2]
            .max(fd_error(&cql.grads_a, agent.critic_a.params(), CRITIC_STEP, |p| closs(&with_critic(Some(p), None))))
            .max(fd_error(&cql.grads_b, agent.critic_b.params(), CRITIC_STEP, |p| closs(&with_critic(None, Some(p)))));

        let mut m = Cvae::new(
            2,
            &[Bounds::symmetric(1.0), Bounds::symmetric(2.0)],
            &CvaeConfig { hidden: 12, kl_weight: 0.5, lr: 1e-3 },
            &mut stream(seed, 1),
        );
        let mut rng = stream(seed, 5);
        m.decoder.params_mut().iter_mut().for_each(|p| *p += 0.1 * normal(&mut rng));
        let s = Matrix::from_fn(6, 2, |_, _| normal(&mut rng));
        let a = Matrix::from_fn(6, 2, |_, j| rng.random_range(-0.8..0.8) * (j + 1) as f64);
        let z = Matrix::from_fn(6, 4, |_, _| normal(&mut rng));
        let elbo = m.elbo(&s, &a, &z, 0.5).unwrap();
        let (es, ds) = (m.encoder.spec().clone(), m.decoder.spec().clone());
        worst[3] = worst[3]
            .max(fd_error(&elbo.encoder_grads, m.encoder.params(), 1e-5, |p| {
                let mut mm = m.clone();
                mm.encoder = Mlp::from_params(es.clone(), p.to_vec()).unwrap();
                mm.elbo(&s, &a, &z, 0.5).unwrap().loss
            }))
            .max(fd_error(&elbo.decoder_grads, m.decoder.params(), 1e-5, |p| {
                let mut mm = m.clone();
                mm.decoder = Mlp::from_params(ds.clone(), p.to_vec()).unwrap();
                mm.elbo(&s, &a, &z, 0.5).unwrap().loss
            }));
    }
    ensure(
        worst.iter().all(|&e| e < 1e-4),
        format!(
            "max rel err over 10 seeds: critic {:.2e}, actor {:.2e}, cql {:.2e}, elbo {:.2e}",
            worst[0], worst[1], worst[2], worst[3]
        ),
    )
}

// -- OOD detector --

fn detector_calibration() -> Check {
    let t = Instant::now();
    let (n, batch, steps) = (2000, 100, 3000);
    let (mut flagged_far, mut passed_near) = (0, 0);
    for seed in 0..20u64 {
        let mut rng = stream(seed, 11);
        let states = Matrix::from_fn(n, 1, |_, _| rng.random_range(-1.0..1.0));
        let actions = Matrix::from_fn(n, 1, |_, _| rng.random_range(-0.5..0.5));
        let cfg = CvaeConfig { hidden: 64, ..CvaeConfig::default() };
        let mut m = Cvae::new(1, &[Bounds::symmetric(1.0)], &cfg, &mut stream(seed, 12));
        for _ in 0..steps {
            let idx: Vec<usize> = (0..batch).map(|_| rng.random_range(0..n)).collect();
            let bs = Matrix::from_fn(batch, 1, |r, _| states[(idx[r], 0)]);
            let ba = Matrix::from_fn(batch, 1, |r, _| actions[(idx[r], 0)]);
            m.train_step(&bs, &ba, &mut rng).map_err(|e| e.to_string())?;
        }
        let threshold = OodThreshold::from_pass(&m, &states, &actions, 500).map_err(|e| e.to_string())?;
        let probe = |a: f64| is_ood(&m, &threshold, &Matrix::zeros(1, 1), &Matrix::from_fn(1, 1, |_, _| a)).unwrap()[0];
        flagged_far += probe(0.95) as usize;
        passed_near += !probe(0.1) as usize;
    }
    let detail = format!("0.95 flagged OOD in {flagged_far}/20 seeds, 0.1 in-distribution in {passed_near}/20");
    within(Duration::from_secs(600), t, detail).and_then(|d| ensure(flagged_far >= 19 && passed_near >= 18, d))
}

// -- training studies --

fn study_config(dir: &Path, env: &str, iterations: u64, seeds: &[u64]) -> ExperimentConfig {
    let doc = serde_json::json!({
        "env": env,
        "n_iterations": iterations,
        "eval_every": iterations / 10,
        "seeds": seeds,
        "output_dir": dir,
    });
    ExperimentConfig::from_json(&doc.to_string()).unwrap()
}

fn mean_abs_q(o: &ExperimentOutcome) -> f64 {
    o.runs.iter().map(|r| r.final_mean_abs_q).sum::<f64>() / o.runs.len() as f64
}

fn ablation_ordering(root: &Path) -> Check {
    let mut lines = Vec::new();
    let mut scores_ok = true;
    let (mut sac_blows_up, mut scq_stays) = (false, true);
    for env in ["line-bandit", "point-maze"] {
        let base = study_config(&root.join(env), env, 50_000, &[0, 1, 2, 3, 4]);
        let run = |m: Method| {
            run_experiment(&ExperimentConfig { method: m, output_dir: base.output_dir.join(m.tag()), ..base.clone() })
                .map_err(|e| e.to_string())
        };
        let (scq, sac) = (run(Method::Scq)?, run(Method::SacAlpha0)?);
        let scale = scq.runs[0].return_scale;
        let (q_scq, q_sac) = (mean_abs_q(&scq), mean_abs_q(&sac));
        scores_ok &= scq.row.mean > sac.row.mean;
        sac_blows_up |= !(q_sac <= 10.0 * scale);
        scq_stays &= q_scq <= 10.0 * scale;
        lines.push(format!(
            "{env}: scq {:.1}±{:.1} |Q| {q_scq:.1}, sac {:.1}±{:.1} |Q| {q_sac:.3e}, scale {scale}",
            scq.row.mean, scq.row.std, sac.row.mean, sac.row.std
        ));
    }
    ensure(scores_ok && sac_blows_up && scq_stays, lines.join("; "))
}

fn alpha_monotonicity(root: &Path) -> Check {
    let base = study_config(&root.join("alpha"), "line-bandit", 50_000, &[0, 1, 2]);
    let points = run_alpha_sweep(&base, &[0.1, 1.0, 10.0]).map_err(|e| e.to_string())?;
    let q: Vec<f64> = points
        .iter()
        .map(|p| p.outcome.runs.iter().map(|r| r.final_mean_q).sum::<f64>() / p.outcome.runs.len() as f64)
        .collect();
    let detail = format!("final mean Q at α = 0.1, 1, 10: {:.3}, {:.3}, {:.3}", q[0], q[1], q[2]);
    ensure(q[0] >= q[1] && q[1] >= q[2], detail)
}

/// Iterations per run in the fraction study; 40 runs share the two-hour budget.
const FRACTION_ITERATIONS: u64 = 20_000;

fn fraction_robustness(root: &Path) -> Check {
    let t = Instant::now();
    let base = study_config(&root.join("fraction"), "point-maze", FRACTION_ITERATIONS, &[0, 1, 2, 3, 4]);
    let points = run_fraction_study(&base, &DEFAULT_FRACTIONS).map_err(|e| e.to_string())?;
    let mut wins = 0;
    let mut parts = Vec::new();
    for pair in points.chunks(2) {
        let (scq, ln) = (&pair[0].outcome.row, &pair[1].outcome.row);
        wins += (scq.mean >= ln.mean) as usize;
        parts.push(format!("{}: scq {:.1} vs ln {:.1}", pair[0].fraction, scq.mean, ln.mean));
    }
    let detail = format!("scq ≥ ln on {wins}/4 ({})", parts.join(", "));
    within(Duration::from_secs(7200), t, detail).and_then(|d| ensure(wins >= 3, d))
}

// -- determinism --

fn cli_determinism(root: &Path) -> Check {
    let config = r#"{"env": "point-maze", "n_iterations": 2000, "eval_every": 200, "n_eval_episodes": 3, "seeds": [0, 1], "output_dir": "run"}"#;
    fs::create_dir_all(root).map_err(|e| e.to_string())?;
    fs::write(root.join("c.json"), config).map_err(|e| e.to_string())?;
    let scq = |args: &[&str]| {
        Command::new(env!("CARGO_BIN_EXE_scq"))
            .args(args)
            .current_dir(root)
            .env("SCQ_OUTPUT_ROOT", root.join("out"))
            .env("RUST_LOG", "warn")
            .status()
            .map_err(|e| e.to_string())
            .and_then(|s| ensure(s.success(), format!("scq {args:?} exited with {s}")))
    };
    let files = ["run/results.csv", "run/summary.json", "run/metrics/scq_seed0.csv", "run/metrics/scq_seed1.csv", "v.json"];
    let mut snapshots = Vec::new();
    for _ in 0..2 {
        scq(&["train", "c.json"])?;
        scq(&["verify-linear", "--n-instances", "20", "--out", "v.json"])?;
        snapshots.push(files.map(|f| fs::read(root.join("out").join(f)).unwrap_or_default()));
    }
    let differing: Vec<&str> = files.iter().zip(snapshots[0].iter().zip(&snapshots[1])).filter(|(_, (a, b))| a != b).map(|(f, _)| *f).collect();
    ensure(differing.is_empty(), format!("{} files compared, differing: {differing:?}", files.len()))
}

fn main() -> ExitCode {
    let selected: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let scratch = tempfile::tempdir().expect("scratch directory");
    let root = scratch.path();
    let criteria: Vec<(u32, &str, Box<dyn Fn() -> Check>)> = vec![
        (1, "pointwise pessimism on masked pairs", Box::new(pointwise_pessimism)),
        (2, "value ordering between CQL and SCQ", Box::new(value_ordering)),
        (3, "penalty decomposition identity", Box::new(penalty_decomposition)),
        (4, "tabular equivalence", Box::new(tabular_equivalence)),
        (5, "gradient suite", Box::new(gradient_suite)),
        (6, "OOD detector calibration", Box::new(detector_calibration)),
        (7, "ablation ordering against SAC(α=0)", Box::new(|| ablation_ordering(&root.join("ablation")))),
        (8, "final Q monotone in α", Box::new(|| alpha_monotonicity(&root.join("sweep")))),
        (9, "dataset-fraction robustness against layer norm", Box::new(|| fraction_robustness(&root.join("fraction")))),
        (10, "CLI determinism", Box::new(|| cli_determinism(&root.join("cli")))),
    ];
    let mut failed = 0;
    for (n, name, check) in &criteria {
        if !selected.is_empty() && !selected.contains(n) {
            continue;
        }
        let t = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            Err(p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_default())
        });
        let secs = t.elapsed().as_secs_f64();
        match result {
            Ok(d) => println!("PASS criterion {n} ({name}): {d} [{secs:.1}s]"),
            Err(d) => {
                failed += 1;
                println!("FAIL criterion {n} ({name}): {d} [{secs:.1}s]");
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} acceptance criteria failed");
        ExitCode::FAILURE
    }
}
