//! Experiment protocol: preprocessing, stratified split, label masking,
//! fitting and held-out evaluation, plus the sweeps and baselines built on it.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use lpot::dataset::{self, mask_labels, stratified_split, synth_generate, CsvOptions, FeatureTable, SemiLabels, SynthConfig};
use lpot::graph::AffinityGraph;
use lpot::metrics::MetricsReport;
use lpot::pipeline::{fit, FittedModel, JointConfig, PipelineError, StopReason};
use lpot::preprocessing::{derive_features, knn_impute, quality_filter, robust_scale, DerivedFeatureRule};
use lpot::propagation::{init_label_matrix, propagate_closed_form_with_limit, propagate_iterative};
use ndarray::{Array2, ArrayView2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{DataSource, RunSpec};
use crate::error::{HarnessError, Result};
use crate::report::{summarize, SweepReport, SweepRow};

pub const LABEL_GRID: [f64; 13] = [0.05, 0.10, 0.15, 0.20, 0.25, 0.30, 0.40, 0.50, 0.60, 0.70, 0.80, 0.90, 1.0];
pub const ALPHA_GRID: [f64; 6] = [0.1, 0.2, 0.3, 0.5, 0.7, 0.9];
pub const K_GRID: [usize; 6] = [5, 10, 15, 20, 25, 30];

const MASK_STREAM: u64 = 0x6d61_736b;

/// Scaled feature matrix with the ground-truth labels of the retained rows.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub x: Array2<f64>,
    pub labels: SemiLabels,
    pub feature_names: Vec<String>,
    pub rows_removed: usize,
}

pub fn load_data(data: &DataSource) -> Result<(FeatureTable, SemiLabels)> {
    Ok(match data {
        DataSource::Csv {
            path,
            label_column,
            unlabeled_token,
        } => {
            let opts = CsvOptions {
                unlabeled_token: unlabeled_token.clone(),
                ..CsvOptions::new(label_column.clone())
            };
            dataset::load_csv_with(path, &opts)?
        }
        DataSource::Synth(cfg) => synth_generate(cfg)?,
    })
}

/// Quality filter, ratio features, KNN imputation and robust scaling.
pub fn prepare(spec: &RunSpec) -> Result<Prepared> {
    let (table, labels) = load_data(&spec.data)?;
    let (table, removed) = quality_filter(&table, spec.quality_threshold)?;
    let kept: Vec<usize> = (0..labels.len()).filter(|i| removed.binary_search(i).is_err()).collect();
    let labels = labels.select_rows(&kept);
    let table = derive_features(&table, &DerivedFeatureRule::standard_rules());
    let imputed = knn_impute(&table, spec.impute_k)?;
    let (x, _) = robust_scale(imputed.view());
    Ok(Prepared {
        x,
        labels,
        feature_names: table.feature_names,
        rows_removed: removed.len(),
    })
}

/// Held-out split and the label mask applied to the training portion.
#[derive(Clone, Debug)]
pub struct Split {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
    pub semi: SemiLabels,
}

pub fn split_and_mask(labels: &SemiLabels, test_fraction: f64, keep: f64, seed: u64) -> Result<Split> {
    let (train, test) = stratified_split(labels, test_fraction, seed)?;
    let semi = mask_labels(&labels.restrict_to(&train), keep, seed ^ MASK_STREAM);
    Ok(Split { train, test, semi })
}

fn truth(labels: &SemiLabels, rows: &[usize]) -> Vec<usize> {
    rows.iter().map(|&i| labels.labels[i].expect("split rows are labeled")).collect()
}

fn pick(pred: &[usize], rows: &[usize]) -> Vec<usize> {
    rows.iter().map(|&i| pred[i]).collect()
}

#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub seed: u64,
    pub split: Split,
    pub metrics: MetricsReport,
    /// Accuracy over every training row, masked or not.
    pub train_accuracy: f64,
    pub model: FittedModel,
}

fn joint_for(spec: &RunSpec, seed: u64) -> JointConfig {
    JointConfig {
        seed,
        ..spec.joint.clone()
    }
}

/// One transductive fit and its held-out evaluation.
pub fn run_once(prepared: &Prepared, spec: &RunSpec, seed: u64) -> Result<RunOutcome> {
    let split = split_and_mask(&prepared.labels, spec.test_fraction, spec.keep_fraction, seed)?;
    let model = fit(prepared.x.view(), &split.semi, &spec.train, &joint_for(spec, seed))?;
    let classes = prepared.labels.class_count;
    let pred = model.labels();
    let metrics = MetricsReport::from_labels(&truth(&prepared.labels, &split.test), &pick(pred, &split.test), classes)?;
    let train_accuracy = MetricsReport::from_labels(
        &truth(&prepared.labels, &split.train),
        &pick(pred, &split.train),
        classes,
    )?
    .accuracy;
    Ok(RunOutcome {
        seed,
        split,
        metrics,
        train_accuracy,
        model,
    })
}

/// Label propagation directly on the scaled features with the spec's α and k.
pub fn raw_propagation(prepared: &Prepared, spec: &RunSpec, seed: u64) -> Result<MetricsReport> {
    let split = split_and_mask(&prepared.labels, spec.test_fraction, spec.keep_fraction, seed)?;
    let (_, y) = init_label_matrix(&split.semi).map_err(PipelineError::from)?;
    let graph = AffinityGraph::build(prepared.x.view(), spec.joint.k_neighbors).map_err(PipelineError::from)?;
    let joint = &spec.joint;
    let result = if graph.n() <= joint.dense_limit {
        propagate_closed_form_with_limit(&graph.normalized, y.view(), joint.alpha, joint.dense_limit)
    } else {
        propagate_iterative(&graph.normalized, y.view(), joint.alpha, joint.prop_eps, joint.prop_t_max)
    }
    .map_err(PipelineError::from)?;
    Ok(MetricsReport::from_labels(
        &truth(&prepared.labels, &split.test),
        &pick(&result.labels, &split.test),
        prepared.labels.class_count,
    )?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub spec: RunSpec,
    pub seed: u64,
    pub n_samples: usize,
    pub n_features: usize,
    pub rows_removed: usize,
    pub n_train: usize,
    pub n_labeled: usize,
    pub n_test: usize,
    pub class_names: Vec<String>,
    pub metrics: MetricsReport,
    pub train_accuracy: f64,
    pub stop_reason: StopReason,
    pub outer_iterations: usize,
    pub propagation_passes: usize,
    pub stage_costs: Vec<f64>,
}

impl RunReport {
    fn new(spec: &RunSpec, prepared: &Prepared, outcome: &RunOutcome) -> Self {
        Self {
            spec: spec.clone(),
            seed: outcome.seed,
            n_samples: prepared.x.nrows(),
            n_features: prepared.x.ncols(),
            rows_removed: prepared.rows_removed,
            n_train: outcome.split.train.len(),
            n_labeled: outcome.split.semi.labeled_count(),
            n_test: outcome.split.test.len(),
            class_names: prepared.labels.class_names.clone(),
            metrics: outcome.metrics.clone(),
            train_accuracy: outcome.train_accuracy,
            stop_reason: outcome.model.stop_reason,
            outer_iterations: outcome.model.trace.len(),
            propagation_passes: outcome.model.propagation_passes,
            stage_costs: outcome.model.progression.as_ref().map_or_else(Vec::new, |p| p.costs()),
        }
    }
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(|e| HarnessError::io(path, e))
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| HarnessError::io(dir, e))
}

fn trace_csv(model: &FittedModel) -> String {
    let mut out = String::from("outer,l_ae,l_prop,l_ot,l_smooth,total,labels_changed,inner_steps\n");
    for (t, r) in model.trace.iter().enumerate() {
        let changed = r.labels_changed.map_or(String::new(), |c| c.to_string());
        let steps = r.inner_objectives.len().saturating_sub(1);
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            t + 1,
            r.l_ae,
            r.l_prop,
            r.l_ot,
            r.l_smooth,
            r.total,
            changed,
            steps
        );
    }
    out
}

fn predictions_csv(prepared: &Prepared, outcome: &RunOutcome) -> String {
    let mut role = vec!["unlabeled"; prepared.x.nrows()];
    for &i in &outcome.split.train {
        role[i] = if outcome.split.semi.labels[i].is_some() {
            "labeled"
        } else {
            "masked"
        };
    }
    for &i in &outcome.split.test {
        role[i] = "test";
    }
    let names = &prepared.labels.class_names;
    let mut out = String::from("row,role,true,predicted,confidence\n");
    let p = &outcome.model.propagation;
    for i in 0..prepared.x.nrows() {
        let truth = prepared.labels.labels[i].map_or(String::new(), |c| names[c].clone());
        let _ = writeln!(out, "{},{},{},{},{}", i, role[i], truth, names[p.labels[i]], p.confidence[i]);
    }
    out
}

/// Full pipeline for the first seed of `spec`; writes `report.json`,
/// `trace.csv`, `predictions.csv` and `model.json` under `spec.out`.
pub fn cmd_run(spec: &RunSpec) -> Result<RunReport> {
    spec.validate()?;
    let prepared = prepare(spec)?;
    let outcome = run_once(&prepared, spec, spec.seeds[0])?;
    let report = RunReport::new(spec, &prepared, &outcome);
    ensure_dir(&spec.out)?;
    write(&spec.out.join("report.json"), serde_json::to_string_pretty(&report)?)?;
    write(&spec.out.join("trace.csv"), trace_csv(&outcome.model))?;
    write(&spec.out.join("predictions.csv"), predictions_csv(&prepared, &outcome))?;
    let mut model = Vec::new();
    outcome.model.save(&mut model)?;
    write(&spec.out.join("model.json"), model)?;
    Ok(report)
}

/// One point of a sweep grid: a label fraction and the config to run it with.
#[derive(Clone, Debug)]
pub struct GridPoint {
    pub block: String,
    pub spec: RunSpec,
}

fn pool(jobs: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| HarnessError::Config(format!("thread pool: {e}")))
}

/// Runs every grid point over every seed; failures are recorded per point.
pub fn run_grid(kind: &str, base: &RunSpec, points: Vec<GridPoint>) -> Result<SweepReport> {
    base.validate()?;
    for p in &points {
        p.spec.validate()?;
    }
    let prepared = prepare(base)?;
    let tasks: Vec<(usize, u64)> = (0..points.len())
        .flat_map(|p| base.seeds.iter().map(move |&s| (p, s)))
        .collect();
    let results: Vec<std::result::Result<RunOutcome, String>> = pool(base.jobs)?.install(|| {
        tasks
            .par_iter()
            .map(|&(p, seed)| run_once(&prepared, &points[p].spec, seed).map_err(|e| e.to_string()))
            .collect()
    });
    let mut rows = Vec::with_capacity(points.len());
    for (p, point) in points.iter().enumerate() {
        let outcomes: Vec<&std::result::Result<RunOutcome, String>> = tasks
            .iter()
            .zip(&results)
            .filter(|((q, _), _)| *q == p)
            .map(|(_, r)| r)
            .collect();
        rows.push(SweepRow::from_outcomes(&point.block, point.spec.keep_fraction, &outcomes));
    }
    let summary = summarize(&rows);
    Ok(SweepReport {
        kind: kind.to_string(),
        spec: base.clone(),
        rows,
        summary,
    })
}

fn with_keep(spec: &RunSpec, keep: f64) -> RunSpec {
    RunSpec {
        keep_fraction: keep,
        ..spec.clone()
    }
}

pub fn sweep_labels(spec: &RunSpec, grid: &[f64]) -> Result<SweepReport> {
    let points = grid
        .iter()
        .map(|&keep| GridPoint {
            block: "labels".to_string(),
            spec: with_keep(spec, keep),
        })
        .collect();
    run_grid("labels", spec, points)
}

pub fn sweep_alpha(spec: &RunSpec, alphas: &[f64], keeps: &[f64]) -> Result<SweepReport> {
    let mut points = Vec::new();
    for &alpha in alphas {
        for &keep in keeps {
            let mut s = with_keep(spec, keep);
            s.joint.alpha = alpha;
            points.push(GridPoint {
                block: format!("alpha={alpha}"),
                spec: s,
            });
        }
    }
    run_grid("alpha", spec, points)
}

pub fn sweep_k(spec: &RunSpec, ks: &[usize], keeps: &[f64]) -> Result<SweepReport> {
    let mut points = Vec::new();
    for &k in ks {
        for &keep in keeps {
            let mut s = with_keep(spec, keep);
            s.joint.k_neighbors = k;
            points.push(GridPoint {
                block: format!("k={k}"),
                spec: s,
            });
        }
    }
    run_grid("k", spec, points)
}

/// Writes a sweep as `<name>.csv` and `<name>.json` under `spec.out`.
pub fn write_sweep(report: &SweepReport, name: &str) -> Result<()> {
    let dir = &report.spec.out;
    ensure_dir(dir)?;
    write(&dir.join(format!("{name}.csv")), report.to_csv())?;
    write(&dir.join(format!("{name}.json")), serde_json::to_string_pretty(report)?)?;
    Ok(())
}

/// Most frequent class among labeled rows, lowest id on ties.
pub fn majority_class(semi: &SemiLabels) -> usize {
    let counts = semi.class_counts();
    let mut best = 0;
    for (c, &n) in counts.iter().enumerate() {
        if n > counts[best] {
            best = c;
        }
    }
    best
}

/// Majority vote among the `k` nearest labeled rows (Euclidean); ties go to
/// the tied class whose nearest member is closest.
pub fn knn_classify(x: ArrayView2<'_, f64>, semi: &SemiLabels, queries: &[usize], k: usize) -> Vec<usize> {
    let labeled = semi.labeled_indices();
    let k = k.min(labeled.len()).max(1);
    queries
        .iter()
        .map(|&q| {
            let mut dists: Vec<(f64, usize)> = labeled
                .iter()
                .filter(|&&i| i != q)
                .map(|&i| {
                    let d: f64 = x.row(q).iter().zip(x.row(i).iter()).map(|(a, b)| (a - b) * (a - b)).sum();
                    (d, i)
                })
                .collect();
            dists.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            let mut votes = vec![0usize; semi.class_count];
            let mut first_seen = vec![usize::MAX; semi.class_count];
            for (rank, &(_, i)) in dists.iter().take(k).enumerate() {
                let c = semi.labels[i].expect("labeled");
                votes[c] += 1;
                first_seen[c] = first_seen[c].min(rank);
            }
            (0..semi.class_count)
                .max_by(|&a, &b| votes[a].cmp(&votes[b]).then(first_seen[b].cmp(&first_seen[a])))
                .unwrap_or(0)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaselineReport {
    pub spec: RunSpec,
    pub seed: u64,
    pub majority: MetricsReport,
    pub knn: MetricsReport,
    pub raw_propagation: Option<MetricsReport>,
    pub raw_propagation_error: Option<String>,
}

/// Majority-class and k-NN baselines on the same split and mask as a run.
pub fn cmd_baseline(spec: &RunSpec) -> Result<BaselineReport> {
    spec.validate()?;
    let prepared = prepare(spec)?;
    let seed = spec.seeds[0];
    let split = split_and_mask(&prepared.labels, spec.test_fraction, spec.keep_fraction, seed)?;
    let classes = prepared.labels.class_count;
    let y_true = truth(&prepared.labels, &split.test);
    let majority = vec![majority_class(&split.semi); split.test.len()];
    let knn = knn_classify(prepared.x.view(), &split.semi, &split.test, spec.baseline_k);
    let (raw_propagation, raw_propagation_error) = match raw_propagation(&prepared, spec, seed) {
        Ok(m) => (Some(m), None),
        Err(e) => (None, Some(e.to_string())),
    };
    let report = BaselineReport {
        spec: spec.clone(),
        seed,
        majority: MetricsReport::from_labels(&y_true, &majority, classes)?,
        knn: MetricsReport::from_labels(&y_true, &knn, classes)?,
        raw_propagation,
        raw_propagation_error,
    };
    ensure_dir(&spec.out)?;
    write(&spec.out.join("baseline.json"), serde_json::to_string_pretty(&report)?)?;
    Ok(report)
}

/// Synthetic cohort as CSV: feature columns, then a `stage` label column.
/// Missing cells are written as `NaN`.
pub fn synth_csv(cfg: &SynthConfig) -> Result<String> {
    let (table, labels) = synth_generate(cfg)?;
    let mut out = table.feature_names.join(",");
    out.push_str(",stage\n");
    for i in 0..table.n_rows() {
        for j in 0..table.n_cols() {
            if table.missing[[i, j]] {
                out.push_str("NaN");
            } else {
                let _ = write!(out, "{}", table.values[[i, j]]);
            }
            out.push(',');
        }
        let name = labels.labels[i].map_or("-1".to_string(), |c| labels.class_names[c].clone());
        out.push_str(&name);
        out.push('\n');
    }
    Ok(out)
}

pub fn cmd_synth_dump(cfg: &SynthConfig, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        ensure_dir(dir)?;
    }
    write(path, synth_csv(cfg)?)
}
