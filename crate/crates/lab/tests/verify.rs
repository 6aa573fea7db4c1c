use scq_lab::verify::{verify_linear, VerifyLinearConfig};
use scq_lab::LabError;

#[test]
fn one_hot_instance_passes_with_zero_epsilon() {
    let s = verify_linear(&VerifyLinearConfig::new(1, 1.0, 5, 0)).unwrap();
    assert_eq!(s.config.instance_config().feature_dim, 16);
    assert!(s.all_passed);
    assert_eq!((s.pointwise.passed, s.ordering.passed), (1, 1));
    assert!(s.representation_error < 1e-12, "{}", s.representation_error);
}

#[test]
fn fifty_half_rank_instances_all_pass() {
    let s = verify_linear(&VerifyLinearConfig::new(50, 0.5, 5, 11)).unwrap();
    assert_eq!(s.config.instance_config().feature_dim, 8);
    for (name, c) in [("pointwise", &s.pointwise), ("ordering", &s.ordering)] {
        assert_eq!(c.passed + c.precondition_skipped, 50, "{name}: {c:?}");
        assert_eq!(c.failed, 0, "{name}: {c:?}");
        assert!(c.worst_violation.unwrap() <= 1e-8, "{name}: {c:?}");
    }
    assert!(s.all_passed);
}

#[test]
fn zero_iterations_is_rejected() {
    let err = verify_linear(&VerifyLinearConfig::new(3, 0.5, 0, 0)).unwrap_err();
    assert!(matches!(err, LabError::Config(ref m) if m.contains("at least one iteration")), "{err}");
    assert!(verify_linear(&VerifyLinearConfig::new(0, 0.5, 3, 0)).is_err());
    assert!(verify_linear(&VerifyLinearConfig::new(3, 0.0, 3, 0)).is_err());
}

#[test]
fn summary_is_deterministic_json() {
    let cfg = VerifyLinearConfig::new(10, 0.5, 3, 5);
    let a = serde_json::to_string_pretty(&verify_linear(&cfg).unwrap()).unwrap();
    let b = serde_json::to_string_pretty(&verify_linear(&cfg).unwrap()).unwrap();
    assert_eq!(a, b);
    let v: serde_json::Value = serde_json::from_str(&a).unwrap();
    assert_eq!(v["pointwise"]["passed"], 10);
}
