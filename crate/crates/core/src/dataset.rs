//! Cohort loading, synthetic generation, splitting and label masking.

use std::collections::HashMap;
use std::fmt;
use std::path::Path;

use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("i/o error reading {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("file has no header row")]
    MissingHeader,
    #[error("row {0} has a different number of fields than the header")]
    RaggedRow(usize),
    #[error("cannot parse value at row {row}, column {col}: {value:?}")]
    UnparseableValue { row: usize, col: usize, value: String },
    #[error("label column {0:?} not found in header")]
    UnknownLabelColumn(String),
    #[error("duplicate column name {0:?}")]
    DuplicateColumn(String),
    #[error("class {0} has fewer than two labeled members")]
    ClassTooSmall(usize),
    #[error("invalid synthetic config: {0}")]
    InvalidConfig(String),
    #[error("invalid table: {0}")]
    InvalidTable(String),
}

pub type Result<T> = std::result::Result<T, DatasetError>;

/// Source modality of a feature column.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Modality {
    Mri,
    Csf,
    Demo,
    Derived,
}

impl Modality {
    /// Infers the modality from a column-name prefix (`mri_`, `csf_`,
    /// `demo_`, `derived_`, case-insensitive). Anything else is demographic.
    pub fn from_column_name(name: &str) -> Self {
        let lower = name.to_ascii_lowercase();
        if lower.starts_with("mri_") {
            Modality::Mri
        } else if lower.starts_with("csf_") {
            Modality::Csf
        } else if lower.starts_with("derived_") {
            Modality::Derived
        } else {
            Modality::Demo
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Modality::Mri => "MRI",
            Modality::Csf => "CSF",
            Modality::Demo => "DEMO",
            Modality::Derived => "DERIVED",
        };
        f.write_str(s)
    }
}

/// An n×d table of real features with a missingness mask.
///
/// Missing cells hold `NaN` in `values`; the mask is authoritative.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureTable {
    pub values: Array2<f64>,
    pub missing: Array2<bool>,
    pub feature_names: Vec<String>,
    pub modality: Vec<Modality>,
}

impl FeatureTable {
    pub fn new(
        values: Array2<f64>,
        missing: Array2<bool>,
        feature_names: Vec<String>,
        modality: Vec<Modality>,
    ) -> Result<Self> {
        let table = Self {
            values,
            missing,
            feature_names,
            modality,
        };
        table.validate()?;
        Ok(table)
    }

    /// Wraps a complete matrix; every column is tagged `modality`.
    pub fn from_complete(values: Array2<f64>, modality: Modality) -> Self {
        let d = values.ncols();
        let missing = Array2::from_elem(values.dim(), false);
        Self {
            values,
            missing,
            feature_names: (0..d).map(|j| format!("f{j}")).collect(),
            modality: vec![modality; d],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.values.ncols();
        if self.missing.dim() != self.values.dim() {
            return Err(DatasetError::InvalidTable("mask shape differs from values".into()));
        }
        if self.feature_names.len() != d || self.modality.len() != d {
            return Err(DatasetError::InvalidTable(format!(
                "{} names and {} modality tags for {d} columns",
                self.feature_names.len(),
                self.modality.len()
            )));
        }
        let mut seen = std::collections::HashSet::new();
        for name in &self.feature_names {
            if !seen.insert(name.as_str()) {
                return Err(DatasetError::DuplicateColumn(name.clone()));
            }
        }
        for ((i, j), v) in self.values.indexed_iter() {
            if !self.missing[[i, j]] && !v.is_finite() {
                return Err(DatasetError::InvalidTable(format!(
                    "non-finite observed value at ({i}, {j})"
                )));
            }
        }
        Ok(())
    }

    pub fn n_rows(&self) -> usize {
        self.values.nrows()
    }

    pub fn n_cols(&self) -> usize {
        self.values.ncols()
    }

    pub fn column_index(&self, name: &str) -> Option<usize> {
        self.feature_names.iter().position(|n| n == name)
    }

    pub fn missing_count(&self) -> usize {
        self.missing.iter().filter(|&&m| m).count()
    }

    /// Keeps only the given rows, in the given order.
    pub fn select_rows(&self, rows: &[usize]) -> Self {
        let d = self.n_cols();
        let mut values = Array2::zeros((rows.len(), d));
        let mut missing = Array2::from_elem((rows.len(), d), false);
        for (r, &i) in rows.iter().enumerate() {
            values.row_mut(r).assign(&self.values.row(i));
            missing.row_mut(r).assign(&self.missing.row(i));
        }
        Self {
            values,
            missing,
            feature_names: self.feature_names.clone(),
            modality: self.modality.clone(),
        }
    }
}

/// Per-row class ids with `None` marking an unlabeled row.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SemiLabels {
    pub labels: Vec<Option<usize>>,
    pub class_count: usize,
    /// Display names, `class_names[c]` for class id `c`.
    pub class_names: Vec<String>,
}

/// The unlabeled sentinel.
pub const UNLABELED: Option<usize> = None;

impl SemiLabels {
    pub fn new(labels: Vec<Option<usize>>, class_count: usize) -> Result<Self> {
        if let Some(bad) = labels.iter().flatten().find(|&&c| c >= class_count) {
            return Err(DatasetError::InvalidTable(format!(
                "label {bad} out of range for {class_count} classes"
            )));
        }
        Ok(Self {
            labels,
            class_count,
            class_names: (0..class_count).map(|c| c.to_string()).collect(),
        })
    }

    /// All rows labeled.
    pub fn from_classes(classes: &[usize], class_count: usize) -> Result<Self> {
        Self::new(classes.iter().map(|&c| Some(c)).collect(), class_count)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labeled_count(&self) -> usize {
        self.labels.iter().filter(|l| l.is_some()).count()
    }

    pub fn labeled_indices(&self) -> Vec<usize> {
        self.labels
            .iter()
            .enumerate()
            .filter_map(|(i, l)| l.map(|_| i))
            .collect()
    }

    pub fn select_rows(&self, rows: &[usize]) -> Self {
        Self {
            labels: rows.iter().map(|&i| self.labels[i]).collect(),
            class_count: self.class_count,
            class_names: self.class_names.clone(),
        }
    }

    /// Copy with every row outside `keep` set to unlabeled.
    pub fn restrict_to(&self, keep: &[usize]) -> Self {
        let mut labels = vec![UNLABELED; self.labels.len()];
        for &i in keep {
            labels[i] = self.labels[i];
        }
        Self {
            labels,
            class_count: self.class_count,
            class_names: self.class_names.clone(),
        }
    }

    /// Labeled rows per class.
    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.class_count];
        for c in self.labels.iter().flatten() {
            counts[*c] += 1;
        }
        counts
    }
}

#[derive(Clone, Debug)]
pub struct CsvOptions {
    pub label_column: String,
    pub unlabeled_token: String,
    pub nan_token: String,
}

impl CsvOptions {
    pub fn new(label_column: impl Into<String>) -> Self {
        Self {
            label_column: label_column.into(),
            unlabeled_token: "-1".into(),
            nan_token: "NaN".into(),
        }
    }
}

/// Reads a headed CSV; see [`load_csv_with`].
pub fn load_csv(
    path: impl AsRef<Path>,
    label_column: &str,
    unlabeled_token: &str,
) -> Result<(FeatureTable, SemiLabels)> {
    let opts = CsvOptions {
        unlabeled_token: unlabeled_token.to_string(),
        ..CsvOptions::new(label_column)
    };
    load_csv_with(path, &opts)
}

/// Reads a headed CSV into features and labels.
///
/// Empty cells and `nan_token` cells become missing. Class names receive ids
/// in order of first appearance; an empty label cell or `unlabeled_token`
/// marks the row unlabeled. Modality tags come from column-name prefixes.
pub fn load_csv_with(path: impl AsRef<Path>, opts: &CsvOptions) -> Result<(FeatureTable, SemiLabels)> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|source| DatasetError::Io {
        path: path.display().to_string(),
        source,
    })?;
    read_csv(file, opts)
}

pub fn read_csv<R: std::io::Read>(reader: R, opts: &CsvOptions) -> Result<(FeatureTable, SemiLabels)> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_reader(reader);
    let mut records = rdr.records();
    let header = match records.next() {
        Some(rec) => rec?,
        None => return Err(DatasetError::MissingHeader),
    };
    let header: Vec<String> = header.iter().map(|h| h.trim().to_string()).collect();
    if header.iter().all(|h| h.is_empty()) {
        return Err(DatasetError::MissingHeader);
    }
    let label_col = header
        .iter()
        .position(|h| *h == opts.label_column)
        .ok_or_else(|| DatasetError::UnknownLabelColumn(opts.label_column.clone()))?;
    let feature_cols: Vec<usize> = (0..header.len()).filter(|&c| c != label_col).collect();
    let feature_names: Vec<String> = feature_cols.iter().map(|&c| header[c].clone()).collect();

    let mut data = Vec::new();
    let mut mask = Vec::new();
    let mut labels = Vec::new();
    let mut class_ids: HashMap<String, usize> = HashMap::new();
    let mut class_names = Vec::new();

    for (row, rec) in records.enumerate() {
        let rec = rec?;
        if rec.len() != header.len() {
            return Err(DatasetError::RaggedRow(row));
        }
        for &c in &feature_cols {
            let cell = rec[c].trim();
            if cell.is_empty() || cell == opts.nan_token {
                data.push(f64::NAN);
                mask.push(true);
            } else {
                let v: f64 = cell.parse().map_err(|_| DatasetError::UnparseableValue {
                    row,
                    col: c,
                    value: cell.to_string(),
                })?;
                if !v.is_finite() {
                    return Err(DatasetError::UnparseableValue {
                        row,
                        col: c,
                        value: cell.to_string(),
                    });
                }
                data.push(v);
                mask.push(false);
            }
        }
        let token = rec[label_col].trim();
        if token.is_empty() || token == opts.unlabeled_token {
            labels.push(UNLABELED);
        } else {
            let next = class_ids.len();
            let id = *class_ids.entry(token.to_string()).or_insert_with(|| {
                class_names.push(token.to_string());
                next
            });
            labels.push(Some(id));
        }
    }

    let n = labels.len();
    let d = feature_cols.len();
    let values = Array2::from_shape_vec((n, d), data).expect("row-major buffer matches shape");
    let missing = Array2::from_shape_vec((n, d), mask).expect("row-major buffer matches shape");
    let modality = feature_names.iter().map(|n| Modality::from_column_name(n)).collect();
    let table = FeatureTable::new(values, missing, feature_names, modality)?;
    let semi = SemiLabels {
        labels,
        class_count: class_names.len(),
        class_names,
    };
    Ok((table, semi))
}

/// Parameters of the synthetic cohort generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_per_class: Vec<usize>,
    pub ambient_dim: usize,
    pub manifold_dim: usize,
    pub class_separation: f64,
    pub noise_sigma: f64,
    pub missing_rate: f64,
    pub seed: u64,
}

impl SynthConfig {
    /// Four ordered classes with the imbalance profile of a memory-clinic
    /// cohort (roughly 63/4/20/13 percent), 500 subjects in total.
    pub fn cohort(seed: u64) -> Self {
        Self {
            n_per_class: vec![316, 18, 100, 66],
            ambient_dim: 40,
            manifold_dim: 4,
            class_separation: 4.0,
            noise_sigma: 1.0,
            missing_rate: 0.0,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(DatasetError::InvalidConfig(m.to_string()));
        if self.n_per_class.is_empty() || self.n_per_class.iter().any(|&n| n == 0) {
            return bad("every class needs at least one sample");
        }
        if self.ambient_dim == 0 || self.manifold_dim == 0 {
            return bad("dimensions must be positive");
        }
        if self.manifold_dim > self.ambient_dim {
            return bad("manifold_dim exceeds ambient_dim");
        }
        if !(self.class_separation >= 0.0 && self.class_separation.is_finite()) {
            return bad("class_separation must be finite and non-negative");
        }
        if !(self.noise_sigma > 0.0 && self.noise_sigma.is_finite()) {
            return bad("noise_sigma must be positive");
        }
        if !(0.0..1.0).contains(&self.missing_rate) {
            return bad("missing_rate must lie in [0, 1)");
        }
        Ok(())
    }

    pub fn total(&self) -> usize {
        self.n_per_class.iter().sum()
    }
}

/// Draws a labelled synthetic cohort.
///
/// Class `t` is `N(t * separation * u, I)` in the manifold space, where `u`
/// is a seeded unit direction; samples are mapped into the ambient space by
/// a seeded matrix with orthonormal columns and perturbed by isotropic
/// Gaussian noise. Rows are grouped by class. Missing cells are chosen
/// independently with probability `missing_rate`.
pub fn synth_generate(config: &SynthConfig) -> Result<(FeatureTable, SemiLabels)> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let m = config.manifold_dim;
    let d = config.ambient_dim;

    let direction = random_unit_vector(&mut rng, m);
    let embedding = random_orthonormal_columns(&mut rng, d, m);

    let n = config.total();
    let mut values = Array2::zeros((n, d));
    let mut labels = Vec::with_capacity(n);
    let mut row = 0;
    for (class, &count) in config.n_per_class.iter().enumerate() {
        let mean = &direction * (class as f64 * config.class_separation);
        for _ in 0..count {
            let latent: Array1<f64> =
                Array1::from_shape_fn(m, |a| mean[a] + rng.sample::<f64, _>(StandardNormal));
            let mut x = embedding.dot(&latent);
            for v in x.iter_mut() {
                *v += config.noise_sigma * rng.sample::<f64, _>(StandardNormal);
            }
            values.row_mut(row).assign(&x);
            labels.push(Some(class));
            row += 1;
        }
    }

    let mut missing = Array2::from_elem((n, d), false);
    if config.missing_rate > 0.0 {
        for ((i, j), v) in values.indexed_iter_mut() {
            if rng.random::<f64>() < config.missing_rate {
                *v = f64::NAN;
                missing[[i, j]] = true;
            }
        }
    }

    let feature_names = (0..d).map(|j| format!("x{j}")).collect();
    let table = FeatureTable::new(values, missing, feature_names, vec![Modality::Mri; d])?;
    let class_count = config.n_per_class.len();
    let semi = SemiLabels {
        labels,
        class_count,
        class_names: (0..class_count).map(|c| format!("stage{c}")).collect(),
    };
    Ok((table, semi))
}

fn random_unit_vector(rng: &mut ChaCha8Rng, m: usize) -> Array1<f64> {
    loop {
        let v: Array1<f64> = Array1::from_shape_fn(m, |_| rng.sample(StandardNormal));
        let norm = v.dot(&v).sqrt();
        if norm > 1e-8 {
            return v / norm;
        }
    }
}

/// d×m matrix with orthonormal columns via modified Gram-Schmidt.
fn random_orthonormal_columns(rng: &mut ChaCha8Rng, d: usize, m: usize) -> Array2<f64> {
    let mut q = Array2::<f64>::zeros((d, m));
    let mut col = 0;
    while col < m {
        let mut v: Array1<f64> = Array1::from_shape_fn(d, |_| rng.sample(StandardNormal));
        for prev in 0..col {
            let p = q.column(prev);
            let proj = p.dot(&v);
            v.scaled_add(-proj, &p);
        }
        let norm = v.dot(&v).sqrt();
        if norm > 1e-8 {
            q.column_mut(col).assign(&(v / norm));
            col += 1;
        }
    }
    q
}

/// Splits labeled rows into train and test index sets, per class.
///
/// Each class contributes `round(test_fraction * count)` rows to the test
/// set, at least one and at most `count - 1`. Unlabeled rows appear in
/// neither output. Both outputs are sorted.
pub fn stratified_split(
    labels: &SemiLabels,
    test_fraction: f64,
    seed: u64,
) -> Result<(Vec<usize>, Vec<usize>)> {
    assert!(
        test_fraction > 0.0 && test_fraction < 1.0,
        "test_fraction must lie in (0, 1)"
    );
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); labels.class_count];
    for (i, l) in labels.labels.iter().enumerate() {
        if let Some(c) = l {
            by_class[*c].push(i);
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (class, mut members) in by_class.into_iter().enumerate() {
        if members.is_empty() {
            continue;
        }
        if members.len() < 2 {
            return Err(DatasetError::ClassTooSmall(class));
        }
        members.shuffle(&mut rng);
        let count = members.len();
        let n_test = ((test_fraction * count as f64).round() as usize).clamp(1, count - 1);
        test.extend_from_slice(&members[..n_test]);
        train.extend_from_slice(&members[n_test..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    Ok((train, test))
}

/// Number of rows retained when keeping `fraction` of `n`: `ceil(fraction * n)`.
///
/// Products that land within 1e-9 of an integer are treated as that integer
/// so that e.g. `0.3 * 10` keeps 3 rather than 4.
pub fn retained_count(fraction: f64, n: usize) -> usize {
    let exact = fraction * n as f64;
    let nearest = exact.round();
    let count = if (exact - nearest).abs() < 1e-9 {
        nearest
    } else {
        exact.ceil()
    };
    (count as usize).min(n)
}

/// Keeps the labels of a uniformly sampled `ceil(keep_fraction * n)` of the
/// labeled rows and marks the rest unlabeled. Rows that are already
/// unlabeled stay unlabeled and do not count towards `n`.
pub fn mask_labels(labels: &SemiLabels, keep_fraction: f64, seed: u64) -> SemiLabels {
    assert!(
        keep_fraction > 0.0 && keep_fraction <= 1.0,
        "keep_fraction must lie in (0, 1]"
    );
    let mut eligible = labels.labeled_indices();
    let keep = retained_count(keep_fraction, eligible.len());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    eligible.shuffle(&mut rng);
    let mut kept = eligible[..keep].to_vec();
    kept.sort_unstable();
    labels.restrict_to(&kept)
}
