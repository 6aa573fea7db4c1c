//! Metrics CSV files.
//!
//! A file opens with `# key=value` lines (always `config_hash`, `task`,
//! `method`, `seed` and `seeds`), then a header row and one row per logging
//! interval. The columns are [`IterationMetrics::COLUMNS`] followed by
//! [`EVAL_COLUMNS`].

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use scq_core::agent::IterationMetrics;

use crate::{fsutil, LabError, Result};

pub const EVAL_COLUMNS: [&str; 2] = ["eval_return", "normalized_score"];

pub fn columns() -> Vec<String> {
    IterationMetrics::COLUMNS.iter().chain(EVAL_COLUMNS.iter()).map(|c| c.to_string()).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsFile {
    pub header: BTreeMap<String, String>,
    pub columns: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

pub fn seed_list(seeds: &[u64]) -> String {
    seeds.iter().map(u64::to_string).collect::<Vec<_>>().join(",")
}

impl MetricsFile {
    pub fn new(header: BTreeMap<String, String>) -> Self {
        MetricsFile { header, columns: columns(), rows: Vec::new() }
    }

    pub fn push(&mut self, m: &IterationMetrics, eval_return: f64, normalized_score: f64) {
        self.rows.push(vec![
            m.iteration.to_string(),
            m.critic_loss.to_string(),
            m.bellman_loss.to_string(),
            m.alpha_term.to_string(),
            m.actor_loss.to_string(),
            m.mean_q.to_string(),
            m.mean_abs_q.to_string(),
            m.delta.to_string(),
            m.ood_rate.to_string(),
            m.lambda.to_string(),
            m.actor_lr.to_string(),
            m.critic_checksum.to_string(),
            eval_return.to_string(),
            normalized_score.to_string(),
        ]);
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.header.get(key).map(String::as_str)
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.header {
            let _ = writeln!(out, "# {k}={v}");
        }
        out.push_str(&self.columns.join(","));
        out.push('\n');
        for r in &self.rows {
            out.push_str(&r.join(","));
            out.push('\n');
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut header = BTreeMap::new();
        let mut lines = text.lines().peekable();
        while let Some(line) = lines.next_if(|l| l.starts_with('#')) {
            let (k, v) = line[1..]
                .trim_start()
                .split_once('=')
                .ok_or_else(|| LabError::Format(format!("header line {line:?} is not key=value")))?;
            header.insert(k.to_string(), v.to_string());
        }
        let columns: Vec<String> =
            lines.next().ok_or_else(|| LabError::Format("missing column row".into()))?.split(',').map(String::from).collect();
        let mut rows = Vec::new();
        for (i, line) in lines.enumerate() {
            let row: Vec<String> = line.split(',').map(String::from).collect();
            if row.len() != columns.len() {
                return Err(LabError::Format(format!("row {}: {} fields for {} columns", i + 1, row.len(), columns.len())));
            }
            rows.push(row);
        }
        Ok(MetricsFile { header, columns, rows })
    }

    pub fn column(&self, name: &str) -> Result<Vec<f64>> {
        let j = self
            .columns
            .iter()
            .position(|c| c == name)
            .ok_or_else(|| LabError::Format(format!("no column {name:?}")))?;
        self.rows
            .iter()
            .map(|r| r[j].parse::<f64>().map_err(|e| LabError::Format(format!("{name}: {:?}: {e}", r[j]))))
            .collect()
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fsutil::atomic_write(path, self.render().as_bytes())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }
}
