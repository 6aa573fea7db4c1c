use proptest::prelude::*;
use scq_core::env::*;
use scq_core::rng::stream;

fn step(env: EnvKind, s: &[f64], a: &[f64]) -> Step {
    env.step(s, a, &mut stream(0, 0)).unwrap()
}

#[test]
fn point_maze_null_action_stays() {
    let s = [0.5, 0.5];
    let out = step(EnvKind::PointMaze, &s, &[0.0, 0.0]);
    assert_eq!(out.next_state, s.to_vec());
    assert_eq!(out.reward, 0.0);
    assert!(!out.done);
}

#[test]
fn point_maze_goal_pays_and_ends() {
    let out = step(EnvKind::PointMaze, &[1.1, 2.5], &[-1.0, 0.0]);
    assert!(point_maze::in_goal(&out.next_state));
    assert_eq!(out.reward, 1.0);
    assert!(out.done);
}

#[test]
fn point_maze_wall_blocks_and_slides() {
    // straight up into the wall: no move
    let out = step(EnvKind::PointMaze, &[0.5, 0.875], &[0.0, 1.0]);
    assert_eq!(out.next_state, vec![0.5, 0.875]);
    // diagonal into the wall keeps the x component
    let out = step(EnvKind::PointMaze, &[0.5, 0.9375], &[0.625, 0.625]);
    assert_eq!(out.next_state, vec![round32(0.5 + point_maze::DT * 0.625), 0.9375]);
    // cutting the wall's corner is refused
    assert!(!point_maze::segment_clear(&[1.9, 0.95], &[2.05, 1.1]));
    assert!(point_maze::segment_clear(&[2.0, 0.95], &[2.0, 1.5]));
    // leaving the arena is refused
    let out = step(EnvKind::PointMaze, &[2.9375, 0.5], &[1.0, 0.0]);
    assert_eq!(out.next_state, vec![2.9375, 0.5]);
}

#[test]
fn point_maze_overspeed_spins_out() {
    let out = step(EnvKind::PointMaze, &[0.5, 0.5], &[0.8, 0.8]);
    assert_eq!(out.next_state, vec![0.5, 0.5]);
    assert_eq!(out.reward, 0.0);
    assert!(out.done);
    // exactly at the limit is still safe
    let out = step(EnvKind::PointMaze, &[0.5, 0.5], &[0.0, 1.0]);
    assert!(!out.done);
}

#[test]
fn point_maze_controllers_respect_cruise_speed() {
    for behavior in [Behavior::Medium, Behavior::Expert] {
        let ds = generate_dataset(EnvKind::PointMaze, behavior, 5_000, 3).unwrap();
        for i in 0..ds.len() {
            let a = ds.action(i);
            let speed = ((a[0] as f64).powi(2) + (a[1] as f64).powi(2)).sqrt();
            assert!(speed <= point_maze::CRUISE + 1e-6, "{speed}");
        }
    }
}

#[test]
fn point_maze_shortest_path_goes_around() {
    let mut c = point_maze::START_CELL;
    let mut path = vec![c];
    while c != point_maze::GOAL_CELL {
        c = point_maze::next_cell(c, point_maze::GOAL_CELL);
        path.push(c);
    }
    assert_eq!(path, vec![0, 1, 2, 5, 8, 7, 6]);
}

#[test]
fn push_slide_matches_hand_trajectory() {
    let mut rng = stream(17, 0);
    let s0 = EnvKind::PushSlide.reset(&mut rng);
    let actions = [[1.0, -0.5], [0.25, 0.25], [-1.0, 1.0], [0.0, 0.0], [0.7, -0.3]];
    let mut s = s0.clone();
    // hand oracle: v' = v + 0.1(a − 0.5v), p' = p + 0.1v', r = −|p'|² − 0.01|a|², all rounded to f32
    let mut h = s0.clone();
    for a in actions {
        let out = step(EnvKind::PushSlide, &s, &a);
        let a32 = [a[0] as f32 as f64, a[1] as f32 as f64];
        let vx = h[2] + 0.1 * (a32[0] - 0.5 * h[2]);
        let vy = h[3] + 0.1 * (a32[1] - 0.5 * h[3]);
        let px = h[0] + 0.1 * vx;
        let py = h[1] + 0.1 * vy;
        let r = -(px * px + py * py) - 0.01 * (a32[0] * a32[0] + a32[1] * a32[1]);
        h = vec![px as f32 as f64, py as f32 as f64, vx as f32 as f64, vy as f32 as f64];
        assert_eq!(out.next_state, h);
        assert_eq!(out.reward, r as f32 as f64);
        assert!(!out.done);
        s = out.next_state;
    }
}

#[test]
fn line_bandit_reward_shape() {
    assert_eq!(line_bandit::reward(0.0, 0.51), -1.0);
    assert!((line_bandit::reward(0.0, 0.5) - 1.0).abs() < 1e-15);
    assert!((line_bandit::reward(0.0, -0.5) - 0.6).abs() < 1e-12);
    assert!(line_bandit::reward(0.0, -1.0) < 1e-5);
    assert!((line_bandit::reward(1.0, 0.6) - 0.8).abs() < 1e-12);
}

#[test]
fn step_rejects_nan_and_bad_dims() {
    let mut rng = stream(0, 0);
    assert_eq!(EnvKind::PointMaze.step(&[f64::NAN, 0.5], &[0.0, 0.0], &mut rng), Err(EnvError::NonFinite));
    assert!(matches!(EnvKind::PointMaze.step(&[0.5], &[0.0, 0.0], &mut rng), Err(EnvError::Dimension { .. })));
}

#[test]
fn actions_are_clipped() {
    let out = step(EnvKind::LineBandit, &[0.0], &[7.0]);
    assert_eq!(out.reward, -1.0);
    let out = step(EnvKind::PointMaze, &[1.5, 0.5], &[5.0, 0.0]);
    assert_eq!(out.next_state[0], round32(1.5 + point_maze::DT));
}

#[test]
fn empty_dataset_is_an_error() {
    let err = generate_dataset(EnvKind::LineBandit, Behavior::Random, 0, 1).unwrap_err();
    assert_eq!(err.to_string(), "nonempty dataset required");
}

#[test]
fn unknown_labels_are_errors() {
    assert!(matches!(Behavior::from_label("mediocre"), Err(EnvError::UnknownBehavior(_))));
    assert!(matches!(EnvKind::from_name("ant-maze"), Err(EnvError::UnknownEnv(_))));
    for b in Behavior::ALL {
        assert_eq!(Behavior::from_label(b.label()).unwrap(), b);
    }
}

#[test]
fn generation_is_deterministic_and_exact_size() {
    for env in EnvKind::ALL {
        for b in Behavior::ALL {
            let a = generate_dataset(env, b, 301, 9).unwrap();
            let c = generate_dataset(env, b, 301, 9).unwrap();
            assert_eq!(a, c);
            assert_eq!(a.len(), 301);
            a.validate().unwrap();
            assert_eq!(a.meta.behavior, b.label());
            assert!(a.actions.iter().all(|x| (-1.0..=1.0).contains(x)));
        }
    }
}

#[test]
fn mixes_alternate_their_tiers() {
    let mix = generate_dataset(EnvKind::LineBandit, Behavior::MediumExpertMix, 200, 4).unwrap();
    // medium keeps at least 0.15 below the edge, expert sits 0.01 below it
    for i in 0..200 {
        let t = mix.transition(i);
        let gap = line_bandit::edge(t.state[0]) - t.action[0];
        if i % 2 == 0 {
            assert!(gap >= 0.149, "row {i}: {gap}");
        } else {
            assert!((gap - 0.01).abs() < 1e-6, "row {i}: {gap}");
        }
    }
}

fn chi_square_uniform(values: &[f64], bins: usize) -> f64 {
    let mut counts = vec![0usize; bins];
    for &v in values {
        let b = (((v + 1.0) / 2.0) * bins as f64).floor() as usize;
        counts[b.min(bins - 1)] += 1;
    }
    let expected = values.len() as f64 / bins as f64;
    counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum()
}

#[test]
fn random_line_bandit_actions_are_uniform() {
    let ds = generate_dataset(EnvKind::LineBandit, Behavior::Random, 10_000, 1).unwrap();
    let actions: Vec<f64> = ds.actions.iter().map(|&a| a as f64).collect();
    let stat = chi_square_uniform(&actions, 20);
    // 99th percentile of χ² with 19 degrees of freedom
    assert!(stat < 36.191, "χ² = {stat}");
    // the same statistic on direct uniform draws stays in the same range
    use rand::Rng as _;
    let mut rng = stream(1, 123);
    let direct: Vec<f64> = (0..10_000).map(|_| rng.random_range(-1.0..1.0)).collect();
    assert!(chi_square_uniform(&direct, 20) < 36.191);
}

#[test]
fn maze_datasets_never_cross_walls() {
    for b in [Behavior::Random, Behavior::Medium, Behavior::Expert] {
        let ds = generate_dataset(EnvKind::PointMaze, b, 5_000, 2).unwrap();
        for i in 0..ds.len() {
            let t = ds.transition(i);
            assert!(point_maze::segment_clear(&t.state, &t.next_state), "{b:?} row {i}: {t:?}");
        }
    }
}

#[test]
fn maze_medium_data_reaches_the_goal_sometimes() {
    let ds = generate_dataset(EnvKind::PointMaze, Behavior::Medium, 20_000, 3).unwrap();
    let goals = ds.rewards.iter().filter(|&&r| r > 0.0).count();
    assert!(goals > 10 && goals < 2_000, "{goals}");
    assert_eq!(goals, ds.dones.iter().filter(|&&d| d).count());
}

#[test]
fn subsample_examples() {
    let ds = generate_dataset(EnvKind::PushSlide, Behavior::Medium, 100, 5).unwrap();
    let all = subsample(&ds, 1.0, 3).unwrap();
    assert_eq!(all.states, ds.states);
    assert_eq!(all.rewards, ds.rewards);
    assert_eq!(all.meta.fraction, 1.0);

    let half = subsample(&ds, 0.5, 3).unwrap();
    assert_eq!(half.len(), 50);
    assert_eq!(half.meta.fraction, 0.5);
    assert_eq!(subsample(&ds, 0.29, 3).unwrap().len(), 29);

    let a = subsample(&ds, 0.1, 8).unwrap();
    let b = subsample(&ds, 0.1, 8).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.len(), 10);

    assert_eq!(subsample(&ds, 0.0, 1).unwrap_err(), EnvError::Fraction(0.0));
    assert_eq!(subsample(&ds, 1.5, 1).unwrap_err(), EnvError::Fraction(1.5));
    assert!(matches!(subsample(&ds, 0.001, 1), Err(EnvError::EmptySubsample { .. })));
}

#[test]
fn subsample_rows_come_from_the_parent() {
    let ds = generate_dataset(EnvKind::LineBandit, Behavior::Medium, 500, 6).unwrap();
    let sub = subsample(&ds, 0.3, 2).unwrap();
    let parent: Vec<Transition> = (0..ds.len()).map(|i| ds.transition(i)).collect();
    for i in 0..sub.len() {
        assert!(parent.contains(&sub.transition(i)));
    }
}

#[test]
fn normalized_score_anchors() {
    let scale = ScoreScale { random_score: -20.0, expert_score: 80.0 };
    assert_eq!(normalized_score(&scale, -20.0), 0.0);
    assert_eq!(normalized_score(&scale, 80.0), 100.0);
    assert_eq!(normalized_score(&scale, 30.0), 50.0);
}

#[test]
fn score_scale_fixtures_reproduce() {
    for env in EnvKind::ALL {
        let stored = ScoreScale::for_env(env);
        let fresh = ScoreScale::measure(env, SCORE_SCALE_EPISODES, SCORE_SCALE_SEED).unwrap();
        assert_eq!(stored, fresh, "{env:?}");
        assert!(stored.expert_score > stored.random_score);
    }
}

#[test]
fn rollouts_are_deterministic() {
    let a = scripted_returns(EnvKind::PointMaze, Behavior::Medium, 3, 4).unwrap();
    let b = scripted_returns(EnvKind::PointMaze, Behavior::Medium, 3, 4).unwrap();
    assert_eq!(a, b);
}

#[test]
fn behavior_tiers_are_ordered() {
    for env in EnvKind::ALL {
        let scale = ScoreScale::for_env(env);
        let medium = scripted_returns(env, Behavior::Medium, 100, 1).unwrap().mean_return;
        let score = normalized_score(&scale, medium);
        assert!(score > 10.0 && score < 100.0, "{env:?}: {score}");
    }
}

proptest! {
    #[test]
    fn normalization_is_affine_invariant(lo in -100.0f64..0.0, span in 1.0f64..100.0, raw in -200.0f64..200.0,
                                         k in 0.1f64..10.0, c in -50.0f64..50.0) {
        let scale = ScoreScale { random_score: lo, expert_score: lo + span };
        let moved = ScoreScale { random_score: k * lo + c, expert_score: k * (lo + span) + c };
        let a = normalized_score(&scale, raw);
        let b = normalized_score(&moved, k * raw + c);
        prop_assert!((a - b).abs() <= 1e-9 * (1.0 + a.abs()));
    }
}
