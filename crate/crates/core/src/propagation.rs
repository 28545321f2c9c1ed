//! Label propagation over a normalised graph operator.
//!
//! The iteration `F ← α S F + (1 − α) Y` contracts with factor `α ‖S‖₂ ≤ α`
//! and its fixed point solves `(I − α S) F = (1 − α) Y`. Both routes are
//! provided; they agree to solver tolerance.

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::SemiLabels;
use crate::linalg::{cholesky, cholesky_solve, frobenius_distance, frobenius_norm};
use crate::sparse::CsrMatrix;

/// Largest node count handled by the dense direct solve.
pub const DEFAULT_DENSE_LIMIT: usize = 5000;

#[derive(Debug, Error, PartialEq)]
pub enum PropagationError {
    #[error("no labeled rows to propagate from")]
    NoLabeledRows,
    #[error("alpha must lie in [0, 1), got {0}")]
    InvalidAlpha(f64),
    #[error("row {0} of the label matrix has no positive entry")]
    ZeroRow(usize),
    #[error("linear solve failed: I - alpha*S is not positive definite")]
    SolveFailure,
    #[error("{n} nodes exceed the direct-solve limit of {limit}")]
    TooLargeForDirectSolve { n: usize, limit: usize },
    #[error("operator has {operator} rows but label matrix has {labels}")]
    DimensionMismatch { operator: usize, labels: usize },
}

pub type Result<T> = std::result::Result<T, PropagationError>;

/// One-hot rows for labeled nodes, uniform `1/c` rows for unlabeled ones.
/// Returns `(F0, Y)` with `F0 = Y`.
pub fn init_label_matrix(semi: &SemiLabels) -> Result<(Array2<f64>, Array2<f64>)> {
    if semi.labeled_count() == 0 || semi.class_count == 0 {
        return Err(PropagationError::NoLabeledRows);
    }
    let c = semi.class_count;
    let mut y = Array2::zeros((semi.len(), c));
    for (i, label) in semi.labels.iter().enumerate() {
        match label {
            Some(class) => y[[i, *class]] = 1.0,
            None => y.row_mut(i).fill(1.0 / c as f64),
        }
    }
    Ok((y.clone(), y))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PropagationResult {
    pub scores: Array2<f64>,
    pub labels: Vec<usize>,
    pub confidence: Vec<f64>,
    pub iterations_used: usize,
    /// Last update norm for the iterative solver; fixed-point residual
    /// `‖F − αSF − (1−α)Y‖_F` for the direct solver.
    pub residual: f64,
    /// False when the iterative solver hit its iteration cap.
    pub converged: bool,
}

fn check(s: &CsrMatrix, y: ArrayView2<'_, f64>, alpha: f64) -> Result<()> {
    if !(0.0..1.0).contains(&alpha) {
        return Err(PropagationError::InvalidAlpha(alpha));
    }
    if s.n() != y.nrows() {
        return Err(PropagationError::DimensionMismatch {
            operator: s.n(),
            labels: y.nrows(),
        });
    }
    Ok(())
}

/// One propagation step `α S F + (1 − α) Y`.
pub fn step(s: &CsrMatrix, f: ArrayView2<'_, f64>, y: ArrayView2<'_, f64>, alpha: f64) -> Array2<f64> {
    let mut next = s.mul_dense(f);
    next *= alpha;
    next.scaled_add(1.0 - alpha, &y);
    next
}

/// Iterates from `F0 = Y` until the Frobenius change drops below `eps` or
/// `t_max` steps have run.
pub fn propagate_iterative(
    s: &CsrMatrix,
    y: ArrayView2<'_, f64>,
    alpha: f64,
    eps: f64,
    t_max: usize,
) -> Result<PropagationResult> {
    check(s, y, alpha)?;
    let mut f = y.to_owned();
    let mut residual = f64::INFINITY;
    let mut iterations = 0;
    while iterations < t_max {
        let next = step(s, f.view(), y, alpha);
        residual = frobenius_distance(next.view(), f.view());
        f = next;
        iterations += 1;
        if residual < eps {
            break;
        }
    }
    finish(f, iterations, residual, residual < eps)
}

/// Solves `(I − α S) F = (1 − α) Y` by a dense Cholesky factorisation.
pub fn propagate_closed_form(s: &CsrMatrix, y: ArrayView2<'_, f64>, alpha: f64) -> Result<PropagationResult> {
    propagate_closed_form_with_limit(s, y, alpha, DEFAULT_DENSE_LIMIT)
}

pub fn propagate_closed_form_with_limit(
    s: &CsrMatrix,
    y: ArrayView2<'_, f64>,
    alpha: f64,
    dense_limit: usize,
) -> Result<PropagationResult> {
    check(s, y, alpha)?;
    let n = s.n();
    if n > dense_limit {
        return Err(PropagationError::TooLargeForDirectSolve { n, limit: dense_limit });
    }
    let mut system = s.to_dense() * -alpha;
    for i in 0..n {
        system[[i, i]] += 1.0;
    }
    let factor = cholesky(system.view()).ok_or(PropagationError::SolveFailure)?;
    let rhs = y.to_owned() * (1.0 - alpha);
    let f = cholesky_solve(factor.view(), rhs.view());
    let residual = propagation_residual(s, f.view(), y, alpha).sqrt();
    finish(f, 0, residual, true)
}

/// `‖F − α S F − (1 − α) Y‖_F²`.
pub fn propagation_residual(s: &CsrMatrix, f: ArrayView2<'_, f64>, y: ArrayView2<'_, f64>, alpha: f64) -> f64 {
    let mut r = f.to_owned();
    r.scaled_add(-alpha, &s.mul_dense(f));
    r.scaled_add(-(1.0 - alpha), &y);
    let norm = frobenius_norm(r.view());
    norm * norm
}

fn finish(f: Array2<f64>, iterations_used: usize, residual: f64, converged: bool) -> Result<PropagationResult> {
    let (labels, confidence) = assign(f.view())?;
    Ok(PropagationResult {
        scores: f,
        labels,
        confidence,
        iterations_used,
        residual,
        converged,
    })
}

/// Row-wise argmax (lowest index on ties) and the winning share of the row
/// sum as confidence.
pub fn assign(f: ArrayView2<'_, f64>) -> Result<(Vec<usize>, Vec<f64>)> {
    let mut labels = Vec::with_capacity(f.nrows());
    let mut confidence = Vec::with_capacity(f.nrows());
    for (i, row) in f.rows().into_iter().enumerate() {
        let mut best = 0;
        for j in 1..row.len() {
            if row[j] > row[best] {
                best = j;
            }
        }
        if row.is_empty() || !(row[best] > 0.0) {
            return Err(PropagationError::ZeroRow(i));
        }
        let total: f64 = row.iter().sum();
        labels.push(best);
        confidence.push(row[best] / total);
    }
    Ok((labels, confidence))
}
