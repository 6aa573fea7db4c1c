use std::collections::BTreeMap;

use scq_lab::metrics::{columns, MetricsFile};
use scq_lab::plot::{emit_plots, seed_band, write_plots};

fn file(task: &str, method: &str, seed: u64, scores: &[f64]) -> MetricsFile {
    let header = BTreeMap::from([
        ("config_hash".to_string(), "00".to_string()),
        ("task".to_string(), task.to_string()),
        ("method".to_string(), method.to_string()),
        ("seed".to_string(), seed.to_string()),
        ("seeds".to_string(), "0,1".to_string()),
    ]);
    let mut f = MetricsFile::new(header);
    let width = columns().len();
    for (i, s) in scores.iter().enumerate() {
        let mut row = vec!["0".to_string(); width];
        row[0] = ((i + 1) * 100 - 1).to_string();
        row[width - 1] = s.to_string();
        f.rows.push(row);
    }
    f
}

#[test]
fn single_seed_band_collapses() {
    let f = file("t", "scq", 0, &[1.0, 5.0, 3.0]);
    let c = seed_band("scq", &[&f], "normalized_score").unwrap();
    assert_eq!(c.mean, c.min);
    assert_eq!(c.mean, c.max);
    assert_eq!(c.iterations, vec![99.0, 199.0, 299.0]);
}

#[test]
fn constant_extremes_give_the_midpoint() {
    let lo = file("t", "scq", 0, &[0.0; 4]);
    let hi = file("t", "scq", 1, &[100.0; 4]);
    let c = seed_band("scq", &[&lo, &hi], "normalized_score").unwrap();
    assert!(c.mean.iter().all(|&m| m == 50.0));
    assert!(c.min.iter().all(|&m| m == 0.0));
    assert!(c.max.iter().all(|&m| m == 100.0));
}

#[test]
fn inconsistent_inputs_are_errors() {
    let a = file("t", "scq", 0, &[1.0, 2.0]);
    let mut b = file("t", "scq", 1, &[1.0, 2.0]);
    b.columns[3] = "other".into();
    assert!(emit_plots(&[a.clone(), b]).is_err());
    let short = file("t", "scq", 1, &[1.0]);
    assert!(emit_plots(&[a, short]).is_err());
    assert!(emit_plots(&[]).is_err());
}

fn fixture() -> Vec<MetricsFile> {
    vec![
        file("line-bandit-medium", "scq", 0, &[10.0, 35.5, 52.0, 61.25]),
        file("line-bandit-medium", "scq", 1, &[4.0, 30.0, 58.0, 57.0]),
        file("line-bandit-medium", "sac_alpha0", 0, &[2.0, -20.0, -60.0, -90.5]),
        file("line-bandit-medium", "sac_alpha0", 1, &[0.0, -15.0, -70.0, -95.0]),
        file("point-maze-medium", "scq", 0, &[0.0, 100.0, 100.0, 100.0]),
    ]
}

#[test]
fn svg_matches_the_golden_file() {
    let plots = emit_plots(&fixture()).unwrap();
    assert_eq!(plots.keys().collect::<Vec<_>>(), vec!["line-bandit-medium", "point-maze-medium"]);
    let svg = &plots["line-bandit-medium"];
    assert!(svg.starts_with("<svg") && svg.ends_with("</svg>\n"));
    assert!(svg.contains(">iteration<") && svg.contains(">normalized score<"));
    assert_eq!(svg.matches("<polyline").count(), 2);
    let golden = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/line-bandit-medium.svg");
    if std::env::var_os("SCQ_BLESS").is_some() {
        std::fs::write(&golden, svg).unwrap();
    }
    assert_eq!(svg, &std::fs::read_to_string(&golden).unwrap());
}

#[test]
fn written_plots_are_byte_stable() {
    let dir = tempfile::tempdir().unwrap();
    let a = write_plots(&dir.path().join("a"), &fixture()).unwrap();
    let b = write_plots(&dir.path().join("b"), &fixture()).unwrap();
    assert_eq!(a.len(), 2);
    for (x, y) in a.iter().zip(&b) {
        assert_eq!(std::fs::read(x).unwrap(), std::fs::read(y).unwrap());
    }
}
