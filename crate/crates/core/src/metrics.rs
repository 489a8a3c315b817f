//! Accuracy-matrix bookkeeping, average accuracy / forgetting, and result files.
//!
//! Task numbers in this module are 1-based: `get(t, k)` is the accuracy on
//! task `k` after training through task `t`, defined for `k <= t`.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::continual::RunLog;
use crate::error::{Error, Result};

pub const ACCURACY_MATRIX_FILE: &str = "accuracy_matrix.csv";
pub const METRICS_FILE: &str = "metrics.json";
pub const CURVES_FILE: &str = "curves.csv";

const MATRIX_HEADER: &str = "trained_through,eval_task,accuracy";
const CURVES_HEADER: &str = "task,checkpoint,accuracy";

/// Lower-triangular matrix of accuracies (fractions in [0, 1]).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AccuracyMatrix {
    rows: Vec<Vec<f64>>,
}

impl AccuracyMatrix {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        let mut m = Self::new();
        for row in rows {
            m.push_row(row)?;
        }
        Ok(m)
    }

    /// Appends the evaluations made after finishing the next task; the row
    /// must hold one accuracy per task seen so far.
    pub fn push_row(&mut self, row: Vec<f64>) -> Result<()> {
        let t = self.rows.len() + 1;
        if row.len() != t {
            return Err(Error::structural(format!(
                "row {t} needs {t} entries, got {}",
                row.len()
            )));
        }
        if let Some(bad) = row.iter().find(|a| !(0.0..=1.0).contains(*a)) {
            return Err(Error::structural(format!("accuracy {bad} outside [0, 1]")));
        }
        self.rows.push(row);
        Ok(())
    }

    /// Number of tasks completed.
    pub fn tasks(&self) -> usize {
        self.rows.len()
    }

    pub fn get(&self, t: usize, k: usize) -> Option<f64> {
        if k == 0 || k > t {
            return None;
        }
        self.rows.get(t.checked_sub(1)?)?.get(k - 1).copied()
    }

    pub fn row(&self, t: usize) -> Option<&[f64]> {
        self.rows.get(t.checked_sub(1)?).map(Vec::as_slice)
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    /// Accuracies on every task after the last one trained.
    pub fn final_accuracies(&self) -> Vec<f64> {
        self.rows.last().cloned().unwrap_or_default()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from(MATRIX_HEADER);
        s.push('\n');
        for (t, row) in self.rows.iter().enumerate() {
            for (k, a) in row.iter().enumerate() {
                writeln!(s, "{},{},{}", t + 1, k + 1, a).expect("write to string");
            }
        }
        s
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next().map(str::trim) != Some(MATRIX_HEADER) {
            return Err(Error::structural("accuracy matrix CSV: missing header"));
        }
        let mut rows: Vec<Vec<f64>> = Vec::new();
        for (n, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let bad = || Error::structural(format!("accuracy matrix CSV line {}: `{line}`", n + 2));
            let fields: Vec<&str> = line.trim().split(',').collect();
            let [t, k, a] = fields[..] else {
                return Err(bad());
            };
            let t: usize = t.parse().map_err(|_| bad())?;
            let k: usize = k.parse().map_err(|_| bad())?;
            let a: f64 = a.parse().map_err(|_| bad())?;
            if t == rows.len() + 1 {
                rows.push(Vec::new());
            }
            if t != rows.len() {
                return Err(bad());
            }
            let row = rows.last_mut().ok_or_else(bad)?;
            if k != row.len() + 1 {
                return Err(bad());
            }
            row.push(a);
        }
        Self::from_rows(rows)
    }

    /// Long format: one line per recorded entry, `task` being the evaluated
    /// task and `checkpoint` the task trained through.
    pub fn curves_csv(&self) -> String {
        let mut s = String::from(CURVES_HEADER);
        s.push('\n');
        for k in 1..=self.tasks() {
            for t in k..=self.tasks() {
                writeln!(s, "{},{},{}", k, t, self.get(t, k).expect("recorded")).expect("write to string");
            }
        }
        s
    }
}

/// `(1/t) Σ_{k ≤ t} a[t][k]`.
pub fn average_accuracy(m: &AccuracyMatrix, t: usize) -> Result<f64> {
    let row = m
        .row(t)
        .filter(|_| t >= 1)
        .ok_or_else(|| Error::structural(format!("no accuracy row {t} (have {})", m.tasks())))?;
    Ok(row.iter().sum::<f64>() / t as f64)
}

/// `(1/(t-1)) Σ_{k < t} max_{k ≤ τ ≤ t-1} (a[τ][k] - a[t][k])`.
pub fn average_forgetting(m: &AccuracyMatrix, t: usize) -> Result<f64> {
    if t < 2 {
        return Err(Error::structural("forgetting needs at least two tasks"));
    }
    if t > m.tasks() {
        return Err(Error::structural(format!("no accuracy row {t} (have {})", m.tasks())));
    }
    let mut total = 0.0;
    for k in 1..t {
        let last = m.get(t, k).expect("recorded");
        let peak = (k..t)
            .map(|tau| m.get(tau, k).expect("recorded") - last)
            .fold(f64::NEG_INFINITY, f64::max);
        total += peak;
    }
    Ok(total / (t - 1) as f64)
}

/// Accuracy fraction rendered as a percentage with four decimals.
pub fn percent(fraction: f64) -> String {
    format!("{:.4}", 100.0 * fraction)
}

#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct MetricsSummary {
    pub variant: String,
    pub seed: u64,
    pub tasks: usize,
    pub completed: bool,
    pub average_accuracy: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub average_forgetting: Option<f64>,
    pub per_task_final: Vec<f64>,
    /// `A_t` for every completed `t`.
    pub average_accuracy_curve: Vec<f64>,
    pub steps: u64,
    pub descent_failures: u64,
    pub basis_size: usize,
}

pub fn summarize(m: &AccuracyMatrix, log: &RunLog) -> MetricsSummary {
    let t = m.tasks();
    MetricsSummary {
        variant: log.variant.to_string(),
        seed: log.seed,
        tasks: t,
        completed: log.aborted.is_none(),
        average_accuracy: average_accuracy(m, t).ok(),
        average_forgetting: average_forgetting(m, t).ok(),
        per_task_final: m.final_accuracies(),
        average_accuracy_curve: (1..=t).filter_map(|s| average_accuracy(m, s).ok()).collect(),
        steps: log.counters.steps,
        descent_failures: log.counters.descent_failures,
        basis_size: log.basis_size,
    }
}

#[derive(Debug, Clone)]
pub struct ResultPaths {
    pub accuracy_matrix: PathBuf,
    pub metrics: PathBuf,
    pub curves: PathBuf,
}

impl ResultPaths {
    pub fn in_dir(dir: impl AsRef<Path>) -> Self {
        let dir = dir.as_ref();
        ResultPaths {
            accuracy_matrix: dir.join(ACCURACY_MATRIX_FILE),
            metrics: dir.join(METRICS_FILE),
            curves: dir.join(CURVES_FILE),
        }
    }
}

fn write(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

/// Writes `accuracy_matrix.csv`, `metrics.json` and `curves.csv`.
pub fn emit_results(m: &AccuracyMatrix, log: &RunLog, paths: &ResultPaths) -> Result<MetricsSummary> {
    let summary = summarize(m, log);
    write(&paths.accuracy_matrix, &m.to_csv())?;
    let mut json = serde_json::to_string_pretty(&summary).expect("summary serializes");
    json.push('\n');
    write(&paths.metrics, &json)?;
    write(&paths.curves, &m.curves_csv())?;
    Ok(summary)
}
