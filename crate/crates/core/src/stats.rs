//! Aggregation helpers shared by the agent metrics and the experiment harness.


/// Mean and population standard deviation by the two-pass algorithm.
///
/// Returns `(0, 0)` for an empty slice; the deviation of a single sample is 0.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (0.0, 0.0);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let ss: f64 = xs.iter().map(|x| (x - mean) * (x - mean)).sum();
    (mean, libm::sqrt(ss / n))
}

pub fn mean(xs: &[f64]) -> f64 {
    mean_std(xs).0
}

pub fn min_max(xs: &[f64]) -> Option<(f64, f64)> {
    let mut it = xs.iter().copied();
    let first = it.next()?;
    Some(it.fold((first, first), |(lo, hi), x| (lo.min(x), hi.max(x))))
}
