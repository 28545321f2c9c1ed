//! Cohort preprocessing: quality filtering, ratio features, KNN imputation
//! and median/IQR scaling.

use ndarray::{Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{FeatureTable, Modality};

#[derive(Debug, Error, PartialEq)]
pub enum PreprocessError {
    #[error("every row exceeds the missingness threshold")]
    AllRowsRemoved,
    #[error("feature {0} has no observed values")]
    FeatureFullyMissing(usize),
    #[error("imputation needs at least two rows")]
    TooFewRows,
    #[error("expected {expected} columns, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
}

pub type Result<T> = std::result::Result<T, PreprocessError>;

/// Removes rows whose missing fraction exceeds `max_missing_fraction`.
///
/// Returns the filtered table and the removed row indices in original order.
pub fn quality_filter(table: &FeatureTable, max_missing_fraction: f64) -> Result<(FeatureTable, Vec<usize>)> {
    let d = table.n_cols();
    let mut kept = Vec::new();
    let mut removed = Vec::new();
    for (i, row) in table.missing.outer_iter().enumerate() {
        let miss = row.iter().filter(|&&m| m).count();
        let fraction = if d == 0 { 0.0 } else { miss as f64 / d as f64 };
        if fraction > max_missing_fraction {
            removed.push(i);
        } else {
            kept.push(i);
        }
    }
    if kept.is_empty() && table.n_rows() > 0 {
        return Err(PreprocessError::AllRowsRemoved);
    }
    Ok((table.select_rows(&kept), removed))
}

/// A ratio feature `numerator / denominator`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DerivedFeatureRule {
    pub name: String,
    pub numerator_feature: String,
    pub denominator_feature: String,
}

impl DerivedFeatureRule {
    pub fn new(name: &str, numerator: &str, denominator: &str) -> Self {
        assert_ne!(numerator, denominator, "ratio of a feature with itself");
        Self {
            name: name.to_string(),
            numerator_feature: numerator.to_string(),
            denominator_feature: denominator.to_string(),
        }
    }

    /// Hippocampal volume over total brain volume, and CSF amyloid over
    /// phosphorylated tau.
    pub fn standard_rules() -> Vec<Self> {
        vec![
            Self::new("derived_hippocampus_tbv", "Hippocampus", "TBV"),
            Self::new("derived_abeta42_ptau", "Abeta42", "ptau"),
        ]
    }
}

/// Appends one derived column per applicable rule.
///
/// A rule applies when both source columns exist and its name is not
/// already taken. A derived cell is missing when either source is missing
/// or the denominator is zero.
pub fn derive_features(table: &FeatureTable, rules: &[DerivedFeatureRule]) -> FeatureTable {
    let mut out = table.clone();
    for rule in rules {
        let (Some(num), Some(den)) = (
            out.column_index(&rule.numerator_feature),
            out.column_index(&rule.denominator_feature),
        ) else {
            continue;
        };
        if out.column_index(&rule.name).is_some() {
            continue;
        }
        let n = out.n_rows();
        let mut col = Vec::with_capacity(n);
        let mut col_missing = Vec::with_capacity(n);
        for i in 0..n {
            let denominator = out.values[[i, den]];
            if out.missing[[i, num]] || out.missing[[i, den]] || denominator == 0.0 {
                col.push(f64::NAN);
                col_missing.push(true);
            } else {
                let v = out.values[[i, num]] / denominator;
                col.push(v);
                col_missing.push(!v.is_finite());
            }
        }
        let col = ndarray::Array1::from(col);
        let col_missing = ndarray::Array1::from(col_missing);
        out.values
            .push_column(col.view())
            .expect("column length equals row count");
        out.missing
            .push_column(col_missing.view())
            .expect("column length equals row count");
        out.feature_names.push(rule.name.clone());
        out.modality.push(Modality::Derived);
    }
    out
}

/// Distance between two rows over the features observed in both, scaled by
/// `sqrt(d / overlap)`. Infinite when the rows share no observed feature.
pub fn partial_distance(
    a: ArrayView1<'_, f64>,
    a_missing: ArrayView1<'_, bool>,
    b: ArrayView1<'_, f64>,
    b_missing: ArrayView1<'_, bool>,
) -> f64 {
    let d = a.len();
    let mut sum = 0.0;
    let mut overlap = 0usize;
    for j in 0..d {
        if !a_missing[j] && !b_missing[j] {
            let diff = a[j] - b[j];
            sum += diff * diff;
            overlap += 1;
        }
    }
    if overlap == 0 {
        f64::INFINITY
    } else {
        (sum * d as f64 / overlap as f64).sqrt()
    }
}

/// Fills each missing cell `(i, j)` with the mean of feature `j` over the
/// `k` nearest rows that observe it. Observed cells are copied unchanged.
///
/// Neighbours are ranked by [`partial_distance`], ties by row index; when
/// fewer than `k` rows observe the feature, all of them are averaged.
pub fn knn_impute(table: &FeatureTable, k: usize) -> Result<Array2<f64>> {
    let (n, d) = table.values.dim();
    let mut out = table.values.clone();
    if table.missing_count() == 0 {
        return Ok(out);
    }
    if n < 2 {
        return Err(PreprocessError::TooFewRows);
    }
    for j in 0..d {
        if table.missing.column(j).iter().all(|&m| m) {
            return Err(PreprocessError::FeatureFullyMissing(j));
        }
    }
    let k = k.max(1);
    for i in 0..n {
        let row_missing = table.missing.row(i);
        if !row_missing.iter().any(|&m| m) {
            continue;
        }
        let mut ranked: Vec<(f64, usize)> = (0..n)
            .filter(|&l| l != i)
            .map(|l| {
                let dist = partial_distance(
                    table.values.row(i),
                    row_missing,
                    table.values.row(l),
                    table.missing.row(l),
                );
                (dist, l)
            })
            .collect();
        ranked.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        for j in 0..d {
            if !row_missing[j] {
                continue;
            }
            let donors: Vec<f64> = ranked
                .iter()
                .filter(|&&(_, l)| !table.missing[[l, j]])
                .take(k)
                .map(|&(_, l)| table.values[[l, j]])
                .collect();
            // The column check above guarantees a donor unless row i is the
            // only one observing j, which cannot happen since (i, j) is missing.
            out[[i, j]] = donors.iter().sum::<f64>() / donors.len() as f64;
        }
    }
    Ok(out)
}

/// Per-column median and interquartile range.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalerParams {
    pub medians: Vec<f64>,
    pub iqrs: Vec<f64>,
}

impl ScalerParams {
    pub fn identity(d: usize) -> Self {
        Self {
            medians: vec![0.0; d],
            iqrs: vec![1.0; d],
        }
    }
}

/// Linear-interpolation quantile of already sorted data (Hyndman-Fan type 7).
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    assert!(!sorted.is_empty(), "quantile of empty data");
    let h = (sorted.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Centres every column on its median and divides by its IQR (Q3 - Q1);
/// a zero IQR is replaced by 1.
pub fn robust_scale(matrix: ArrayView2<'_, f64>) -> (Array2<f64>, ScalerParams) {
    let mut medians = Vec::with_capacity(matrix.ncols());
    let mut iqrs = Vec::with_capacity(matrix.ncols());
    for col in matrix.axis_iter(Axis(1)) {
        if col.is_empty() {
            medians.push(0.0);
            iqrs.push(1.0);
            continue;
        }
        let mut sorted = col.to_vec();
        sorted.sort_by(f64::total_cmp);
        medians.push(quantile_sorted(&sorted, 0.5));
        let iqr = quantile_sorted(&sorted, 0.75) - quantile_sorted(&sorted, 0.25);
        iqrs.push(if iqr == 0.0 { 1.0 } else { iqr });
    }
    let params = ScalerParams { medians, iqrs };
    let scaled = apply_scaler(matrix, &params).expect("params built from this matrix");
    (scaled, params)
}

/// Applies stored scaling statistics to new rows.
pub fn apply_scaler(matrix: ArrayView2<'_, f64>, params: &ScalerParams) -> Result<Array2<f64>> {
    if matrix.ncols() != params.medians.len() {
        return Err(PreprocessError::DimensionMismatch {
            expected: params.medians.len(),
            got: matrix.ncols(),
        });
    }
    let mut out = matrix.to_owned();
    for (j, mut col) in out.axis_iter_mut(Axis(1)).enumerate() {
        let (m, s) = (params.medians[j], params.iqrs[j]);
        col.mapv_inplace(|x| (x - m) / s);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn table_with_missing(values: Array2<f64>) -> FeatureTable {
        let missing = values.mapv(f64::is_nan);
        let d = values.ncols();
        FeatureTable::new(
            values,
            missing,
            (0..d).map(|j| format!("c{j}")).collect(),
            vec![Modality::Demo; d],
        )
        .unwrap()
    }

    #[test]
    fn filter_threshold_semantics() {
        let nan = f64::NAN;
        let mut values = Array2::from_elem((2, 10), 1.0);
        for j in 0..6 {
            values[[1, j]] = nan;
        }
        let table = table_with_missing(values);
        let (kept, removed) = quality_filter(&table, 0.5).unwrap();
        assert_eq!(kept.n_rows(), 1);
        assert_eq!(removed, vec![1]);
        let (kept, removed) = quality_filter(&table, 1.0).unwrap();
        assert_eq!(kept.n_rows(), 2);
        assert!(removed.is_empty());
    }

    #[test]
    fn filter_all_removed() {
        let table = table_with_missing(array![[f64::NAN, f64::NAN]]);
        assert_eq!(
            quality_filter(&table, 0.5).unwrap_err(),
            PreprocessError::AllRowsRemoved
        );
    }

    #[test]
    fn derived_ratio_and_singularities() {
        let values = array![[8.0, 1600.0], [4.0, 0.0], [f64::NAN, 10.0]];
        let mut table = table_with_missing(values);
        table.feature_names = vec!["Hippocampus".into(), "TBV".into()];
        let out = derive_features(&table, &DerivedFeatureRule::standard_rules());
        assert_eq!(out.n_cols(), 3);
        assert_eq!(out.modality[2], Modality::Derived);
        assert_eq!(out.values[[0, 2]], 0.005);
        assert!(out.missing[[1, 2]]);
        assert!(out.missing[[2, 2]]);
    }

    #[test]
    fn derived_rule_with_absent_column_is_skipped() {
        let table = table_with_missing(array![[1.0, 2.0]]);
        let out = derive_features(&table, &DerivedFeatureRule::standard_rules());
        assert_eq!(out, table);
    }

    #[test]
    fn impute_identity_on_complete() {
        let table = table_with_missing(array![[1.0, 2.0], [3.0, 4.0]]);
        assert_eq!(knn_impute(&table, 5).unwrap(), table.values);
    }

    #[test]
    fn impute_mean_of_two_nearest() {
        // Row 0 is nearest to rows 1 and 2 on the first feature.
        let table = table_with_missing(array![
            [0.0, f64::NAN],
            [0.1, 2.0],
            [-0.1, 4.0],
            [50.0, 100.0]
        ]);
        let out = knn_impute(&table, 2).unwrap();
        assert_eq!(out[[0, 1]], 3.0);
        assert_eq!(out[[3, 1]], 100.0);
    }

    #[test]
    fn impute_errors() {
        let table = table_with_missing(array![[f64::NAN, 1.0], [f64::NAN, 2.0]]);
        assert_eq!(
            knn_impute(&table, 5).unwrap_err(),
            PreprocessError::FeatureFullyMissing(0)
        );
        let table = table_with_missing(array![[f64::NAN, 1.0]]);
        assert_eq!(knn_impute(&table, 5).unwrap_err(), PreprocessError::TooFewRows);
    }

    #[test]
    fn scale_hand_case() {
        let col = array![[1.0], [2.0], [3.0], [4.0], [5.0]];
        let (scaled, params) = robust_scale(col.view());
        assert_eq!(params.medians, vec![3.0]);
        assert_eq!(params.iqrs, vec![2.0]);
        assert_eq!(
            scaled.column(0).to_vec(),
            vec![-1.0, -0.5, 0.0, 0.5, 1.0]
        );
    }

    #[test]
    fn scale_constant_column() {
        let col = array![[7.0], [7.0], [7.0]];
        let (scaled, params) = robust_scale(col.view());
        assert_eq!(params.iqrs, vec![1.0]);
        assert!(scaled.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn apply_scaler_contract() {
        let x = array![[1.0, 10.0], [2.0, 30.0], [4.0, 20.0]];
        let (scaled, params) = robust_scale(x.view());
        assert_eq!(apply_scaler(x.view(), &params).unwrap(), scaled);
        assert_eq!(
            apply_scaler(x.view(), &ScalerParams::identity(2)).unwrap(),
            x
        );
        assert_eq!(
            apply_scaler(x.view(), &ScalerParams::identity(3)).unwrap_err(),
            PreprocessError::DimensionMismatch { expected: 3, got: 2 }
        );
    }
}
