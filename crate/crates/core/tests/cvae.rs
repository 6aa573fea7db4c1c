use rand::Rng as _;
use scq_core::cvae::*;
use scq_core::env::{generate_dataset, Behavior, Dataset, EnvKind};
use scq_core::linalg::Matrix;
use scq_core::nn::{central_difference, max_relative_error, Bounds};
use scq_core::rng::{normal, stream};

fn small(seed: u64) -> Cvae {
    let cfg = CvaeConfig { hidden: 12, kl_weight: 0.5, lr: 1e-3 };
    Cvae::new(2, &[Bounds::symmetric(1.0), Bounds::symmetric(2.0)], &cfg, &mut stream(seed, 1))
}

fn columns(ds: &Dataset) -> (Matrix, Matrix) {
    let s = Matrix::from_fn(ds.len(), ds.state_dim, |r, j| ds.state(r)[j] as f64);
    let a = Matrix::from_fn(ds.len(), ds.action_dim, |r, j| ds.action(r)[j] as f64);
    (s, a)
}

#[test]
fn untrained_model_reconstructs_zero_action() {
    let m = small(0);
    let s = Matrix::from_fn(5, 2, |r, j| (r + j) as f64 * 0.3);
    let a = Matrix::from_fn(5, 2, |r, j| (r as f64 - j as f64) * 0.2);
    let rec = m.reconstruct(&s, &a).unwrap();
    assert!(rec.as_slice().iter().all(|&x| x == 0.0));
    assert_eq!(m.latent_dim, 4);
}

#[test]
fn constant_decoder_returns_its_bias() {
    let mut m = small(1);
    let (w, b) = m.decoder.layer_mut(1);
    w.iter_mut().for_each(|x| *x = 0.0);
    b.copy_from_slice(&[0.25, -0.5]);
    let s = Matrix::from_fn(4, 2, |r, _| r as f64);
    let a = Matrix::from_fn(4, 2, |r, j| 0.1 * (r * j) as f64);
    let rec = m.reconstruct(&s, &a).unwrap();
    for r in 0..4 {
        assert_eq!(rec.row(r), &[0.25, -0.5]);
    }
}

#[test]
fn decoder_output_is_clipped_to_bounds() {
    let mut m = small(2);
    let (_, b) = m.decoder.layer_mut(1);
    b.copy_from_slice(&[5.0, -5.0]);
    let rec = m.reconstruct(&Matrix::zeros(1, 2), &Matrix::zeros(1, 2)).unwrap();
    assert_eq!(rec.row(0), &[1.0, -2.0]);
}

#[test]
fn kl_vanishes_at_the_prior_and_recon_at_perfect_fit() {
    // zero encoder output layer: μ = 0, log σ² = 0
    let mut m = small(3);
    let (w, b) = m.encoder.layer_mut(1);
    w.iter_mut().for_each(|x| *x = 0.0);
    b.iter_mut().for_each(|x| *x = 0.0);
    let s = Matrix::from_fn(3, 2, |r, j| (r + 2 * j) as f64 * 0.1);
    let a = Matrix::zeros(3, 2);
    let out = m.elbo(&s, &a, &Matrix::from_fn(3, 4, |r, j| (r + j) as f64 * 0.1), 0.5).unwrap();
    assert_eq!(out.kl, 0.0);
    // decoder still outputs zero, matching a = 0 exactly
    assert_eq!(out.recon, 0.0);
    assert_eq!(out.loss, 0.0);
}

fn check_elbo_gradients(seed: u64) {
    let mut m = small(seed);
    // perturb the zero output layer so every path carries gradient
    let mut rng = stream(seed, 5);
    m.decoder.params_mut().iter_mut().for_each(|p| *p += 0.1 * normal(&mut rng));
    let s = Matrix::from_fn(6, 2, |_, _| normal(&mut rng));
    let a = Matrix::from_fn(6, 2, |_, j| rng.random_range(-0.8..0.8) * (j + 1) as f64);
    let eps = Matrix::from_fn(6, 4, |_, _| normal(&mut rng));
    let out = m.elbo(&s, &a, &eps, 0.5).unwrap();

    let enc_spec = m.encoder.spec().clone();
    let num_enc = central_difference(
        |p| {
            let mut mm = m.clone();
            mm.encoder = scq_core::nn::Mlp::from_params(enc_spec.clone(), p.to_vec()).unwrap();
            mm.elbo(&s, &a, &eps, 0.5).unwrap().loss
        },
        m.encoder.params(),
        1e-5,
    );
    let err = max_relative_error(&out.encoder_grads, &num_enc, 1e-6);
    assert!(err < 1e-4, "seed {seed}: encoder rel err {err}");

    let dec_spec = m.decoder.spec().clone();
    let num_dec = central_difference(
        |p| {
            let mut mm = m.clone();
            mm.decoder = scq_core::nn::Mlp::from_params(dec_spec.clone(), p.to_vec()).unwrap();
            mm.elbo(&s, &a, &eps, 0.5).unwrap().loss
        },
        m.decoder.params(),
        1e-5,
    );
    let err = max_relative_error(&out.decoder_grads, &num_dec, 1e-6);
    assert!(err < 1e-4, "seed {seed}: decoder rel err {err}");
}

#[test]
fn elbo_gradients_match_finite_differences() {
    for seed in 0..10 {
        check_elbo_gradients(seed);
    }
}

#[test]
fn threshold_arithmetic() {
    let mut t = OodThreshold::new();
    t.update(&[1.0, 3.0]);
    assert_eq!(t.delta, 2.0);
    t.update(&[5.0]);
    assert_eq!(t.delta, 3.0);
    assert!(t.is_ood_distance(3.0));
    assert!(!t.is_ood_distance(2.999));

    let mut zero = OodThreshold::new();
    zero.update(&[0.0; 10]);
    assert_eq!(zero.delta, 0.0);
    let mut pos = OodThreshold::new();
    pos.update(&[0.5]);
    assert!(!pos.is_ood_distance(0.0));
}

#[test]
fn untrained_delta_is_mean_action_norm() {
    // the zero reconstructor is a constant offset: δ = mean ‖a‖
    let m = small(4);
    let s = Matrix::from_fn(4, 2, |r, _| r as f64);
    let a = Matrix::from_rows(&[vec![0.3, 0.4], vec![0.6, 0.8], vec![0.0, 0.0], vec![-0.3, 0.4]]).unwrap();
    let t = OodThreshold::from_pass(&m, &s, &a, 3).unwrap();
    assert!((t.delta - 2.0 / 4.0).abs() < 1e-15);
    let flags = is_ood(&m, &t, &s, &a).unwrap();
    assert_eq!(flags, vec![true, true, false, true]);
}

#[test]
fn threshold_matches_dataset_mean_after_full_pass() {
    let ds = generate_dataset(EnvKind::LineBandit, Behavior::Medium, 1_000, 2).unwrap();
    let (s, a) = columns(&ds);
    let cfg = CvaeConfig { hidden: 32, ..CvaeConfig::default() };
    let mut m = Cvae::new(1, &[Bounds::symmetric(1.0)], &cfg, &mut stream(2, 0));
    let mut rng = stream(2, 1);
    for _ in 0..50 {
        m.train_step(&s, &a, &mut rng).unwrap();
    }
    let d = m.distances(&s, &a).unwrap();
    let mean = d.iter().sum::<f64>() / d.len() as f64;
    let t = OodThreshold::from_pass(&m, &s, &a, 64).unwrap();
    assert!((t.delta - mean).abs() < 1e-6);
}

#[test]
fn classification_is_monotone_in_distance() {
    let ds = generate_dataset(EnvKind::LineBandit, Behavior::Random, 500, 3).unwrap();
    let (s, a) = columns(&ds);
    let cfg = CvaeConfig { hidden: 16, ..CvaeConfig::default() };
    let mut m = Cvae::new(1, &[Bounds::symmetric(1.0)], &cfg, &mut stream(3, 0));
    let mut rng = stream(3, 1);
    for _ in 0..20 {
        m.train_step(&s, &a, &mut rng).unwrap();
    }
    let t = OodThreshold::from_pass(&m, &s, &a, 100).unwrap();
    let d = m.distances(&s, &a).unwrap();
    let flags = is_ood(&m, &t, &s, &a).unwrap();
    for i in 0..d.len() {
        for j in 0..d.len() {
            if d[i] >= d[j] && flags[j] {
                assert!(flags[i]);
            }
        }
    }
    assert_eq!(flags, is_ood(&m, &t, &s, &a).unwrap());
}

#[test]
fn training_shrinks_reconstruction_distance() {
    let ds = generate_dataset(EnvKind::LineBandit, Behavior::Medium, 10_000, 1).unwrap();
    let held_out = generate_dataset(EnvKind::LineBandit, Behavior::Medium, 2_000, 101).unwrap();
    let (s, a) = columns(&ds);
    let (hs, ha) = columns(&held_out);
    let mut m = Cvae::new(1, &[Bounds::symmetric(1.0)], &CvaeConfig::default(), &mut stream(1, 0));
    let before = OodThreshold::from_pass(&m, &hs, &ha, 500).unwrap().delta;
    let mut rng = stream(1, 1);
    for _ in 0..5_000 {
        let idx: Vec<usize> = (0..100).map(|_| rng.random_range(0..ds.len())).collect();
        let bs = Matrix::from_fn(100, 1, |r, j| s[(idx[r], j)]);
        let ba = Matrix::from_fn(100, 1, |r, j| a[(idx[r], j)]);
        m.train_step(&bs, &ba, &mut rng).unwrap();
    }
    let after = OodThreshold::from_pass(&m, &hs, &ha, 500).unwrap().delta;
    std::println!("held-out reconstruction distance: {before:.4} -> {after:.4} (x{:.2})", before / after);
    assert!(before / after >= 5.0, "{before} -> {after}");
}
