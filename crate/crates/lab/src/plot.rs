//! Learning-curve SVGs.
//!
//! One figure per task. Each method gets its seed-mean normalised score as a
//! line and the seed min–max as a shaded band. Output depends only on the
//! input files, so identical metrics give byte-identical SVGs.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::metrics::MetricsFile;
use crate::{fsutil, LabError, Result};

pub const WIDTH: f64 = 640.0;
pub const HEIGHT: f64 = 400.0;
const MARGIN_LEFT: f64 = 64.0;
const MARGIN_RIGHT: f64 = 150.0;
const MARGIN_TOP: f64 = 36.0;
const MARGIN_BOTTOM: f64 = 48.0;
const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];

#[derive(Debug, Clone, PartialEq)]
pub struct Curve {
    pub method: String,
    pub iterations: Vec<f64>,
    pub mean: Vec<f64>,
    pub min: Vec<f64>,
    pub max: Vec<f64>,
}

/// Mean and min–max of `column` across seeds; every file must log the same
/// iterations.
pub fn seed_band(method: &str, files: &[&MetricsFile], column: &str) -> Result<Curve> {
    let first = files.first().ok_or_else(|| LabError::Format(format!("{method}: no metrics files")))?;
    let iterations = first.column("iteration")?;
    let mut series = Vec::with_capacity(files.len());
    for f in files {
        if f.column("iteration")? != iterations {
            return Err(LabError::Format(format!("{method}: seeds were logged at different iterations")));
        }
        series.push(f.column(column)?);
    }
    let n = series.len() as f64;
    let at = |j: usize| series.iter().map(move |s| s[j]);
    let mean = (0..iterations.len()).map(|j| at(j).sum::<f64>() / n).collect();
    let min = (0..iterations.len()).map(|j| at(j).fold(f64::INFINITY, f64::min)).collect();
    let max = (0..iterations.len()).map(|j| at(j).fold(f64::NEG_INFINITY, f64::max)).collect();
    Ok(Curve { method: method.into(), iterations, mean, min, max })
}

fn range(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values.filter(|v| v.is_finite()).fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), v| (l.min(v), h.max(v)));
    if !lo.is_finite() {
        (0.0, 1.0)
    } else if hi - lo < 1e-12 {
        (lo - 1.0, hi + 1.0)
    } else {
        (lo, hi)
    }
}

fn points(xs: impl Iterator<Item = (f64, f64)>) -> String {
    xs.map(|(x, y)| format!("{x:.2},{y:.2}")).collect::<Vec<_>>().join(" ")
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// SVG for one task.
pub fn render(task: &str, curves: &[Curve], y_label: &str) -> String {
    let (x0, x1) = range(curves.iter().flat_map(|c| c.iterations.iter().copied()));
    let (y0, y1) = range(curves.iter().flat_map(|c| c.min.iter().chain(&c.max).copied()));
    let pw = WIDTH - MARGIN_LEFT - MARGIN_RIGHT;
    let ph = HEIGHT - MARGIN_TOP - MARGIN_BOTTOM;
    let sx = |x: f64| MARGIN_LEFT + (x - x0) / (x1 - x0) * pw;
    let sy = |y: f64| MARGIN_TOP + (y1 - y) / (y1 - y0) * ph;

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(s, r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{:.2}" y="20" text-anchor="middle" font-size="14">{}</text>"#, MARGIN_LEFT + pw / 2.0, escape(task));
    let (bx, by) = (MARGIN_LEFT, MARGIN_TOP + ph);
    let _ = writeln!(s, r#"<path d="M{bx:.2},{MARGIN_TOP:.2} V{by:.2} H{:.2}" fill="none" stroke="black"/>"#, bx + pw);
    for i in 0..=4 {
        let t = i as f64 / 4.0;
        let (xv, yv) = (x0 + t * (x1 - x0), y0 + t * (y1 - y0));
        let (px, py) = (sx(xv), sy(yv));
        let _ = writeln!(s, r#"<line x1="{px:.2}" y1="{by:.2}" x2="{px:.2}" y2="{:.2}" stroke="black"/>"#, by + 4.0);
        let _ = writeln!(s, r#"<text x="{px:.2}" y="{:.2}" text-anchor="middle">{xv:.0}</text>"#, by + 16.0);
        let _ = writeln!(s, r#"<line x1="{:.2}" y1="{py:.2}" x2="{bx:.2}" y2="{py:.2}" stroke="black"/>"#, bx - 4.0);
        let _ = writeln!(s, r#"<text x="{:.2}" y="{:.2}" text-anchor="end">{yv:.1}</text>"#, bx - 6.0, py + 4.0);
    }
    let _ = writeln!(s, r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">iteration</text>"#, MARGIN_LEFT + pw / 2.0, HEIGHT - 8.0);
    let _ = writeln!(
        s,
        r#"<text x="14" y="{0:.2}" text-anchor="middle" transform="rotate(-90 14 {0:.2})">{1}</text>"#,
        MARGIN_TOP + ph / 2.0,
        escape(y_label)
    );
    for (i, c) in curves.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let upper = c.iterations.iter().zip(&c.max).map(|(&x, &y)| (sx(x), sy(y)));
        let lower = c.iterations.iter().zip(&c.min).rev().map(|(&x, &y)| (sx(x), sy(y)));
        let _ = writeln!(s, r#"<polygon points="{}" fill="{color}" fill-opacity="0.2" stroke="none"/>"#, points(upper.chain(lower)));
        let line = c.iterations.iter().zip(&c.mean).map(|(&x, &y)| (sx(x), sy(y)));
        let _ = writeln!(s, r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="2"/>"#, points(line));
        let ly = MARGIN_TOP + 8.0 + 18.0 * i as f64;
        let lx = WIDTH - MARGIN_RIGHT + 12.0;
        let _ = writeln!(s, r#"<line x1="{lx:.2}" y1="{ly:.2}" x2="{:.2}" y2="{ly:.2}" stroke="{color}" stroke-width="2"/>"#, lx + 20.0);
        let _ = writeln!(s, r#"<text x="{:.2}" y="{:.2}">{}</text>"#, lx + 26.0, ly + 4.0, escape(&c.method));
    }
    s.push_str("</svg>\n");
    s
}

/// One SVG per task, keyed by task, from metrics files grouped by their
/// `task` and `method` headers.
pub fn emit_plots(files: &[MetricsFile]) -> Result<BTreeMap<String, String>> {
    let first = files.first().ok_or_else(|| LabError::Format("no metrics files to plot".into()))?;
    if files.iter().any(|f| f.columns != first.columns) {
        return Err(LabError::Format("metrics files have inconsistent column sets".into()));
    }
    let mut groups: BTreeMap<&str, BTreeMap<&str, Vec<&MetricsFile>>> = BTreeMap::new();
    for f in files {
        let key = |k: &str| f.get(k).ok_or_else(|| LabError::Format(format!("metrics file without a {k} header")));
        groups.entry(key("task")?).or_default().entry(key("method")?).or_default().push(f);
    }
    let mut out = BTreeMap::new();
    for (task, methods) in groups {
        let curves = methods
            .iter()
            .map(|(m, fs)| seed_band(m, fs, "normalized_score"))
            .collect::<Result<Vec<_>>>()?;
        out.insert(task.to_string(), render(task, &curves, "normalized score"));
    }
    Ok(out)
}

/// Every `*.csv` directly under `dir` or its `metrics/` subdirectories.
pub fn collect_metrics(dir: &Path) -> Result<Vec<MetricsFile>> {
    let mut paths = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d)? {
            let p = entry?.path();
            if p.is_dir() {
                stack.push(p);
            } else if p.extension().is_some_and(|e| e == "csv") && p.parent().and_then(Path::file_name).is_some_and(|n| n == "metrics") {
                paths.push(p);
            }
        }
    }
    paths.sort();
    paths.iter().map(|p| MetricsFile::read(p)).collect()
}

/// Write `{task}.svg` files into `out_dir`.
pub fn write_plots(out_dir: &Path, files: &[MetricsFile]) -> Result<Vec<PathBuf>> {
    let mut written = Vec::new();
    for (task, svg) in emit_plots(files)? {
        let path = out_dir.join(format!("{task}.svg"));
        fsutil::atomic_write(&path, svg.as_bytes())?;
        written.push(path);
    }
    Ok(written)
}
