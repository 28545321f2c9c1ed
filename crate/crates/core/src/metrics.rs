//! Classification metrics: confusion matrix, accuracy, Cohen's kappa and
//! support-weighted precision/recall/F1.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("{truth} true labels but {pred} predictions")]
    LengthMismatch { truth: usize, pred: usize },
    #[error("class {class} out of range for {classes} classes")]
    ClassOutOfRange { class: usize, classes: usize },
    #[error("confusion matrix is empty")]
    EmptyMatrix,
}

pub type Result<T> = std::result::Result<T, MetricsError>;

/// Counts indexed `[true][predicted]`.
pub type Confusion = Vec<Vec<u64>>;

pub fn confusion(y_true: &[usize], y_pred: &[usize], classes: usize) -> Result<Confusion> {
    if y_true.len() != y_pred.len() {
        return Err(MetricsError::LengthMismatch {
            truth: y_true.len(),
            pred: y_pred.len(),
        });
    }
    let mut m = vec![vec![0u64; classes]; classes];
    for (&t, &p) in y_true.iter().zip(y_pred) {
        for class in [t, p] {
            if class >= classes {
                return Err(MetricsError::ClassOutOfRange { class, classes });
            }
        }
        m[t][p] += 1;
    }
    Ok(m)
}

fn total(m: &Confusion) -> u64 {
    m.iter().flatten().sum()
}

fn trace(m: &Confusion) -> u64 {
    (0..m.len()).map(|k| m[k][k]).sum()
}

fn row_sums(m: &Confusion) -> Vec<u64> {
    m.iter().map(|r| r.iter().sum()).collect()
}

fn col_sums(m: &Confusion) -> Vec<u64> {
    (0..m.len()).map(|j| m.iter().map(|r| r[j]).sum()).collect()
}

pub fn accuracy(m: &Confusion) -> Result<f64> {
    let n = total(m);
    if n == 0 {
        return Err(MetricsError::EmptyMatrix);
    }
    Ok(trace(m) as f64 / n as f64)
}

/// `κ = (p_o − p_e) / (1 − p_e)`; defined as 0 when `p_e = 1`.
///
/// Evaluated as `(n·tr − Σ r_k c_k) / (n² − Σ r_k c_k)` in integers, so the
/// only rounding is the final division.
pub fn cohen_kappa(m: &Confusion) -> Result<f64> {
    let n = total(m) as u128;
    if n == 0 {
        return Err(MetricsError::EmptyMatrix);
    }
    let chance: u128 = row_sums(m)
        .iter()
        .zip(col_sums(m))
        .map(|(&r, c)| r as u128 * c as u128)
        .sum();
    if chance == n * n {
        return Ok(0.0);
    }
    let num = (n * trace(m) as u128) as i128 - chance as i128;
    let den = n * n - chance;
    Ok(num as f64 / den as f64)
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Per-class precision, recall and F1; zero wherever a denominator vanishes.
pub fn per_class_prf(m: &Confusion) -> Vec<(f64, f64, f64)> {
    let rows = row_sums(m);
    let cols = col_sums(m);
    (0..m.len())
        .map(|k| {
            let p = ratio(m[k][k], cols[k]);
            let r = ratio(m[k][k], rows[k]);
            let f = if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
            (p, r, f)
        })
        .collect()
}

/// Support-weighted precision, recall and F1.
pub fn prf_weighted(m: &Confusion) -> Result<(f64, f64, f64)> {
    let n = total(m);
    if n == 0 {
        return Err(MetricsError::EmptyMatrix);
    }
    let support = row_sums(m);
    let mut acc = (0.0, 0.0, 0.0);
    for ((p, r, f), &s) in per_class_prf(m).into_iter().zip(&support) {
        let w = s as f64 / n as f64;
        acc.0 += w * p;
        acc.1 += w * r;
        acc.2 += w * f;
    }
    Ok(acc)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub accuracy: f64,
    pub kappa: f64,
    pub precision_weighted: f64,
    pub recall_weighted: f64,
    pub f1_weighted: f64,
    pub confusion: Confusion,
    pub support: Vec<u64>,
}

impl MetricsReport {
    pub fn from_labels(y_true: &[usize], y_pred: &[usize], classes: usize) -> Result<Self> {
        Self::from_confusion(confusion(y_true, y_pred, classes)?)
    }

    pub fn from_confusion(m: Confusion) -> Result<Self> {
        let (precision_weighted, recall_weighted, f1_weighted) = prf_weighted(&m)?;
        Ok(Self {
            accuracy: accuracy(&m)?,
            kappa: cohen_kappa(&m)?,
            precision_weighted,
            recall_weighted,
            f1_weighted,
            support: row_sums(&m),
            confusion: m,
        })
    }

    /// Aligned text table: Accuracy, Kappa, Precision, Recall, F1, then the
    /// confusion matrix.
    pub fn to_table(&self, method: &str, class_names: &[String]) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<20} {:>9} {:>9} {:>9} {:>9} {:>9}",
            "Method", "Accuracy", "Kappa", "Precision", "Recall", "F1"
        );
        let _ = writeln!(
            out,
            "{:<20} {:>9.3} {:>9.3} {:>9.3} {:>9.3} {:>9.3}",
            method, self.accuracy, self.kappa, self.precision_weighted, self.recall_weighted, self.f1_weighted
        );
        out.push('\n');
        let name = |k: usize| class_names.get(k).cloned().unwrap_or_else(|| k.to_string());
        let _ = write!(out, "{:<12}", "true\\pred");
        for k in 0..self.confusion.len() {
            let _ = write!(out, " {:>8}", name(k));
        }
        out.push('\n');
        for (k, row) in self.confusion.iter().enumerate() {
            let _ = write!(out, "{:<12}", name(k));
            for v in row {
                let _ = write!(out, " {v:>8}");
            }
            out.push('\n');
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn confusion_shapes() {
        let m = confusion(&[0, 1, 1, 2], &[0, 1, 1, 2], 3).unwrap();
        assert_eq!(m, vec![vec![1, 0, 0], vec![0, 2, 0], vec![0, 0, 1]]);
        let m = confusion(&[0, 1], &[1, 0], 2).unwrap();
        assert_eq!(m, vec![vec![0, 1], vec![1, 0]]);
        assert!(matches!(confusion(&[0], &[0, 1], 2), Err(MetricsError::LengthMismatch { .. })));
        assert_eq!(
            confusion(&[0], &[3], 2).unwrap_err(),
            MetricsError::ClassOutOfRange { class: 3, classes: 2 }
        );
    }

    #[test]
    fn kappa_hand_case() {
        let m = vec![vec![20, 5], vec![10, 15]];
        assert!((cohen_kappa(&m).unwrap() - 0.4).abs() < 1e-15);
    }

    #[test]
    fn kappa_perfect_and_constant() {
        assert_eq!(cohen_kappa(&vec![vec![3, 0], vec![0, 4]]).unwrap(), 1.0);
        assert_eq!(cohen_kappa(&vec![vec![3, 0], vec![4, 0]]).unwrap(), 0.0);
        assert_eq!(cohen_kappa(&vec![vec![5, 0], vec![0, 0]]).unwrap(), 0.0);
        assert_eq!(cohen_kappa(&vec![vec![0, 0], vec![0, 0]]).unwrap_err(), MetricsError::EmptyMatrix);
    }

    #[test]
    fn prf_conventions() {
        let (p, r, f) = prf_weighted(&vec![vec![2, 0], vec![0, 3]]).unwrap();
        assert_eq!((p, r, f), (1.0, 1.0, 1.0));
        // Class 1 is never predicted: its precision is 0, not NaN.
        let per = per_class_prf(&vec![vec![2, 0], vec![3, 0]]);
        assert_eq!(per[1], (0.0, 0.0, 0.0));
        assert!((per[0].0 - 0.4).abs() < 1e-15);
    }

    #[test]
    fn report_and_table() {
        let r = MetricsReport::from_labels(&[0, 0, 1, 1], &[0, 1, 1, 1], 2).unwrap();
        assert_eq!(r.accuracy, 0.75);
        assert_eq!(r.support, vec![2, 2]);
        assert_eq!(r.recall_weighted, r.accuracy);
        let table = r.to_table("test", &["N".into(), "AD".into()]);
        assert!(table.contains("Accuracy"));
        assert!(table.contains("0.750"));
    }
}
