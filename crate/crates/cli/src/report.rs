//! Aggregated sweep results.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::config::RunSpec;
use crate::harness::RunOutcome;

/// One grid point aggregated over seeds. Standard deviations are present
/// only when more than one run succeeded.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub block: String,
    pub label_pct: f64,
    /// Labeled training rows fed to propagation.
    pub n_samples: usize,
    pub n_train: usize,
    pub runs: usize,
    pub failures: usize,
    pub accuracy_mean: Option<f64>,
    pub accuracy_std: Option<f64>,
    pub kappa_mean: Option<f64>,
    pub kappa_std: Option<f64>,
    pub f1_mean: Option<f64>,
    pub f1_std: Option<f64>,
    /// Accuracy over all training rows, masked included.
    pub train_accuracy_mean: Option<f64>,
    pub error: Option<String>,
}

/// Sample mean and (n − 1)-normalised standard deviation.
pub fn mean_std(values: &[f64]) -> (Option<f64>, Option<f64>) {
    if values.is_empty() {
        return (None, None);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (Some(mean), None);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (Some(mean), Some(var.sqrt()))
}

impl SweepRow {
    pub fn from_outcomes(block: &str, keep: f64, outcomes: &[&Result<RunOutcome, String>]) -> Self {
        let ok: Vec<&RunOutcome> = outcomes.iter().filter_map(|r| r.as_ref().ok()).collect();
        let error = outcomes.iter().find_map(|r| r.as_ref().err().cloned());
        let collect = |f: &dyn Fn(&RunOutcome) -> f64| ok.iter().map(|o| f(o)).collect::<Vec<f64>>();
        let (accuracy_mean, accuracy_std) = mean_std(&collect(&|o| o.metrics.accuracy));
        let (kappa_mean, kappa_std) = mean_std(&collect(&|o| o.metrics.kappa));
        let (f1_mean, f1_std) = mean_std(&collect(&|o| o.metrics.f1_weighted));
        let (train_accuracy_mean, _) = mean_std(&collect(&|o| o.train_accuracy));
        Self {
            block: block.to_string(),
            label_pct: (keep * 1000.0).round() / 10.0,
            n_samples: ok.first().map_or(0, |o| o.split.semi.labeled_count()),
            n_train: ok.first().map_or(0, |o| o.split.train.len()),
            runs: outcomes.len(),
            failures: outcomes.len() - ok.len(),
            accuracy_mean,
            accuracy_std,
            kappa_mean,
            kappa_std,
            f1_mean,
            f1_std,
            train_accuracy_mean,
            error,
        }
    }
}

/// Monotonicity of mean accuracy along one block's label grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockSummary {
    pub block: String,
    /// Mean accuracy at the largest label fraction minus that at the smallest.
    pub accuracy_gain: Option<f64>,
    /// Consecutive grid points where mean accuracy drops.
    pub inversions: usize,
    pub max_inversion: f64,
}

/// One summary per block that spans at least two label fractions.
pub fn summarize(rows: &[SweepRow]) -> Vec<BlockSummary> {
    let mut blocks: Vec<String> = Vec::new();
    for r in rows {
        if !blocks.contains(&r.block) {
            blocks.push(r.block.clone());
        }
    }
    blocks
        .into_iter()
        .filter(|b| rows.iter().filter(|r| &r.block == b).count() > 1)
        .map(|block| {
            let mut points: Vec<(f64, f64)> = rows
                .iter()
                .filter(|r| r.block == block)
                .filter_map(|r| r.accuracy_mean.map(|a| (r.label_pct, a)))
                .collect();
            points.sort_by(|a, b| a.0.total_cmp(&b.0));
            let drops: Vec<f64> = points
                .windows(2)
                .map(|w| w[0].1 - w[1].1)
                .filter(|&d| d > 0.0)
                .collect();
            BlockSummary {
                block,
                accuracy_gain: match (points.first(), points.last()) {
                    (Some(a), Some(b)) if points.len() > 1 => Some(b.1 - a.1),
                    _ => None,
                },
                inversions: drops.len(),
                max_inversion: drops.iter().copied().fold(0.0, f64::max),
            }
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub kind: String,
    pub spec: RunSpec,
    pub rows: Vec<SweepRow>,
    pub summary: Vec<BlockSummary>,
}

pub const CSV_HEADER: &str = "block,label_pct,n_samples,n_train,runs,failures,accuracy_mean,accuracy_std,kappa_mean,kappa_std,f1_mean,f1_std,train_accuracy_mean";

fn cell(v: Option<f64>) -> String {
    v.map_or(String::new(), |x| format!("{x:.6}"))
}

impl SweepReport {
    /// Long-format CSV, one row per grid point, fixed column order.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(CSV_HEADER);
        out.push('\n');
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{},{},{},{}",
                r.block,
                r.label_pct,
                r.n_samples,
                r.n_train,
                r.runs,
                r.failures,
                cell(r.accuracy_mean),
                cell(r.accuracy_std),
                cell(r.kappa_mean),
                cell(r.kappa_std),
                cell(r.f1_mean),
                cell(r.f1_std),
                cell(r.train_accuracy_mean)
            );
        }
        out
    }

    /// Human-readable table with `mean ± std` cells.
    pub fn to_table(&self) -> String {
        let pm = |m: Option<f64>, s: Option<f64>| match (m, s) {
            (Some(m), Some(s)) => format!("{m:.3} ± {s:.3}"),
            (Some(m), None) => format!("{m:.3}"),
            _ => "failed".to_string(),
        };
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<10} {:>7} {:>7} {:>15} {:>15} {:>15}",
            "block", "label%", "samples", "accuracy", "kappa", "f1"
        );
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{:<10} {:>7} {:>7} {:>15} {:>15} {:>15}",
                r.block,
                r.label_pct,
                r.n_samples,
                pm(r.accuracy_mean, r.accuracy_std),
                pm(r.kappa_mean, r.kappa_std),
                pm(r.f1_mean, r.f1_std)
            );
        }
        for s in &self.summary {
            let _ = writeln!(
                out,
                "{}: gain {}, {} inversion(s), largest {:.4}",
                s.block,
                s.accuracy_gain.map_or("n/a".to_string(), |g| format!("{g:.4}")),
                s.inversions,
                s.max_inversion
            );
        }
        out
    }
}
