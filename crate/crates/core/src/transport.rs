//! Entropic optimal transport between empirical distributions.
//!
//! [`sinkhorn`] scales the Gibbs kernel `K = exp(-C/λ)` until the row
//! marginal error `‖u ⊙ (K v) − a‖₁` falls below tolerance, then returns
//! `T = diag(u) K diag(v)`. When `λ` is small relative to the largest cost
//! the kernel underflows, so the same iteration is run on log-potentials
//! with log-sum-exp reductions instead.

use std::collections::BTreeSet;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::preprocessing::quantile_sorted;

/// Below this ratio `λ / max(C)` the log-domain solver is used directly.
pub const LOG_DOMAIN_RATIO: f64 = 1e-3;

#[derive(Debug, Error, PartialEq)]
pub enum TransportError {
    #[error("marginal entry {0} is not strictly positive")]
    NonPositiveMarginal(usize),
    #[error("marginal sums to {0}, expected 1")]
    UnnormalizedMarginal(f64),
    #[error("regularisation must be positive and finite, got {0}")]
    InvalidLambda(f64),
    #[error("shape mismatch: {0}")]
    DimensionMismatch(String),
    #[error("kernel scaling underflowed in both plain and log domains")]
    NumericalUnderflow,
    #[error("need at least two distinct stages")]
    SingleStage,
    #[error("a stage has no members")]
    EmptyStage,
}

pub type Result<T> = std::result::Result<T, TransportError>;

/// Squared Euclidean costs between rows of `za` and rows of `zb`.
pub fn cost_matrix(za: ArrayView2<'_, f64>, zb: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
    if za.ncols() != zb.ncols() {
        return Err(TransportError::DimensionMismatch(format!(
            "{} vs {} latent dimensions",
            za.ncols(),
            zb.ncols()
        )));
    }
    let mut c = Array2::zeros((za.nrows(), zb.nrows()));
    for (i, a) in za.rows().into_iter().enumerate() {
        for (j, b) in zb.rows().into_iter().enumerate() {
            c[[i, j]] = a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum();
        }
    }
    Ok(c)
}

/// Frobenius inner product `⟨T, C⟩`.
pub fn transport_cost(plan: ArrayView2<'_, f64>, cost: ArrayView2<'_, f64>) -> Result<f64> {
    if plan.dim() != cost.dim() {
        return Err(TransportError::DimensionMismatch(format!(
            "plan {:?} vs cost {:?}",
            plan.dim(),
            cost.dim()
        )));
    }
    Ok(plan.iter().zip(cost.iter()).map(|(t, c)| t * c).sum())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransportPlan {
    pub plan: Array2<f64>,
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    pub cost: f64,
    pub lambda: f64,
    pub converged: bool,
    pub iterations: usize,
    pub log_domain: bool,
}

impl TransportPlan {
    /// L1 deviations of the row and column sums from `a` and `b`.
    pub fn marginal_errors(&self) -> (f64, f64) {
        let rows: f64 = self
            .plan
            .rows()
            .into_iter()
            .zip(&self.a)
            .map(|(r, a)| (r.sum() - a).abs())
            .sum();
        let cols: f64 = self
            .plan
            .columns()
            .into_iter()
            .zip(&self.b)
            .map(|(c, b)| (c.sum() - b).abs())
            .sum();
        (rows, cols)
    }

    /// Plan as CSV, one row per source point.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for row in self.plan.rows() {
            let line: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            out.push_str(&line.join(","));
            out.push('\n');
        }
        out
    }
}

fn validate_marginal(m: ArrayView1<'_, f64>) -> Result<()> {
    if let Some(i) = m.iter().position(|&x| !(x > 0.0) || !x.is_finite()) {
        return Err(TransportError::NonPositiveMarginal(i));
    }
    let sum = m.sum();
    if (sum - 1.0).abs() > 1e-12 {
        return Err(TransportError::UnnormalizedMarginal(sum));
    }
    Ok(())
}

fn validate(cost: ArrayView2<'_, f64>, a: ArrayView1<'_, f64>, b: ArrayView1<'_, f64>, lambda: f64) -> Result<()> {
    if cost.dim() != (a.len(), b.len()) {
        return Err(TransportError::DimensionMismatch(format!(
            "cost {:?} vs marginals ({}, {})",
            cost.dim(),
            a.len(),
            b.len()
        )));
    }
    if !(lambda > 0.0) || !lambda.is_finite() {
        return Err(TransportError::InvalidLambda(lambda));
    }
    validate_marginal(a)?;
    validate_marginal(b)
}

/// Entropic OT plan between marginals `a` and `b` under cost `C`.
pub fn sinkhorn(
    cost: ArrayView2<'_, f64>,
    a: ArrayView1<'_, f64>,
    b: ArrayView1<'_, f64>,
    lambda: f64,
    eps: f64,
    t_max: usize,
) -> Result<TransportPlan> {
    validate(cost, a, b, lambda)?;
    let max_cost = cost.iter().copied().fold(0.0, f64::max);
    if max_cost > 0.0 && lambda / max_cost < LOG_DOMAIN_RATIO {
        return sinkhorn_log(cost, a, b, lambda, eps, t_max);
    }
    match sinkhorn_plain(cost, a, b, lambda, eps, t_max) {
        Ok(plan) => Ok(plan),
        Err(TransportError::NumericalUnderflow) => sinkhorn_log(cost, a, b, lambda, eps, t_max),
        Err(e) => Err(e),
    }
}

/// Matrix-scaling iteration on `K = exp(-C/λ)`. Fails with
/// [`TransportError::NumericalUnderflow`] if a scaling vector stops being
/// finite and positive.
pub fn sinkhorn_plain(
    cost: ArrayView2<'_, f64>,
    a: ArrayView1<'_, f64>,
    b: ArrayView1<'_, f64>,
    lambda: f64,
    eps: f64,
    t_max: usize,
) -> Result<TransportPlan> {
    validate(cost, a, b, lambda)?;
    let kernel = cost.mapv(|c| (-c / lambda).exp());
    let mut u = Array1::<f64>::ones(a.len());
    let mut v = Array1::<f64>::ones(b.len());
    let mut kv = kernel.dot(&v);
    let healthy = |x: &Array1<f64>| x.iter().all(|&s| s > 0.0 && s.is_finite());
    let mut converged = false;
    let mut iterations = 0;
    while iterations < t_max {
        iterations += 1;
        u = &a / &kv;
        let ktu = kernel.t().dot(&u);
        v = &b / &ktu;
        if !healthy(&u) || !healthy(&v) {
            return Err(TransportError::NumericalUnderflow);
        }
        kv = kernel.dot(&v);
        let err: f64 = u
            .iter()
            .zip(kv.iter())
            .zip(a.iter())
            .map(|((ui, kvi), ai)| (ui * kvi - ai).abs())
            .sum();
        if err < eps {
            converged = true;
            break;
        }
    }
    let mut plan = kernel;
    for (i, mut row) in plan.rows_mut().into_iter().enumerate() {
        for (j, t) in row.iter_mut().enumerate() {
            *t *= u[i] * v[j];
        }
    }
    if plan.iter().any(|t| !t.is_finite()) {
        return Err(TransportError::NumericalUnderflow);
    }
    let total = transport_cost(plan.view(), cost)?;
    Ok(TransportPlan {
        plan,
        a: a.to_vec(),
        b: b.to_vec(),
        cost: total,
        lambda,
        converged,
        iterations,
        log_domain: false,
    })
}

fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// The same scaling iteration on log-potentials `f = λ ln u`, `g = λ ln v`.
pub fn sinkhorn_log(
    cost: ArrayView2<'_, f64>,
    a: ArrayView1<'_, f64>,
    b: ArrayView1<'_, f64>,
    lambda: f64,
    eps: f64,
    t_max: usize,
) -> Result<TransportPlan> {
    validate(cost, a, b, lambda)?;
    let (na, nb) = cost.dim();
    let log_a = a.mapv(f64::ln);
    let log_b = b.mapv(f64::ln);
    let mut f = Array1::<f64>::zeros(na);
    let mut g = Array1::<f64>::zeros(nb);
    let mut converged = false;
    let mut iterations = 0;
    while iterations < t_max {
        iterations += 1;
        for i in 0..na {
            let lse = log_sum_exp((0..nb).map(|j| (g[j] - cost[[i, j]]) / lambda));
            f[i] = lambda * (log_a[i] - lse);
        }
        for j in 0..nb {
            let lse = log_sum_exp((0..na).map(|i| (f[i] - cost[[i, j]]) / lambda));
            g[j] = lambda * (log_b[j] - lse);
        }
        if f.iter().chain(g.iter()).any(|p| !p.is_finite()) {
            return Err(TransportError::NumericalUnderflow);
        }
        let err: f64 = (0..na)
            .map(|i| {
                let row: f64 = (0..nb).map(|j| ((f[i] + g[j] - cost[[i, j]]) / lambda).exp()).sum();
                (row - a[i]).abs()
            })
            .sum();
        if err < eps {
            converged = true;
            break;
        }
    }
    let plan = Array2::from_shape_fn((na, nb), |(i, j)| ((f[i] + g[j] - cost[[i, j]]) / lambda).exp());
    if plan.iter().any(|t| !t.is_finite()) {
        return Err(TransportError::NumericalUnderflow);
    }
    let total = transport_cost(plan.view(), cost)?;
    Ok(TransportPlan {
        plan,
        a: a.to_vec(),
        b: b.to_vec(),
        cost: total,
        lambda,
        converged,
        iterations,
        log_domain: true,
    })
}

/// How the entropic regularisation is chosen for each stage pair.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Regularization {
    Absolute(f64),
    /// `factor · median(C)` of the pair's cost matrix.
    MedianScaled(f64),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransportConfig {
    pub regularization: Regularization,
    pub eps: f64,
    pub t_max: usize,
}

impl Default for TransportConfig {
    fn default() -> Self {
        Self {
            regularization: Regularization::MedianScaled(0.1),
            eps: 1e-9,
            t_max: 1000,
        }
    }
}

impl Regularization {
    pub fn resolve(&self, cost: ArrayView2<'_, f64>) -> f64 {
        match *self {
            Regularization::Absolute(l) => l,
            Regularization::MedianScaled(factor) => {
                let mut sorted: Vec<f64> = cost.iter().copied().collect();
                sorted.sort_by(f64::total_cmp);
                let mut scale = quantile_sorted(&sorted, 0.5);
                if !(scale > 0.0) {
                    scale = sorted.iter().sum::<f64>() / sorted.len() as f64;
                }
                if !(scale > 0.0) {
                    scale = 1.0;
                }
                factor * scale
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StagePair {
    pub source: usize,
    pub target: usize,
    pub plan: TransportPlan,
}

/// Transport plans between consecutive stages in ascending stage order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageProgression {
    pub stages: Vec<usize>,
    /// Row indices of each stage's members, aligned with `stages`.
    pub members: Vec<Vec<usize>>,
    pub pairs: Vec<StagePair>,
}

impl StageProgression {
    pub fn costs(&self) -> Vec<f64> {
        self.pairs.iter().map(|p| p.plan.cost).collect()
    }

    pub fn total_cost(&self) -> f64 {
        self.costs().iter().sum()
    }

    /// `Σ_pairs ⟨T, C(Z)⟩` with every plan held fixed, and its gradient with
    /// respect to the rows of `z`.
    pub fn fixed_plan_cost_and_grad(&self, z: ArrayView2<'_, f64>) -> (f64, Array2<f64>) {
        let mut grad = Array2::zeros(z.dim());
        let mut value = 0.0;
        for (p, pair) in self.pairs.iter().enumerate() {
            let src = &self.members[p];
            let dst = &self.members[p + 1];
            for (j, &r) in src.iter().enumerate() {
                for (k, &s) in dst.iter().enumerate() {
                    let t = pair.plan.plan[[j, k]];
                    if t == 0.0 {
                        continue;
                    }
                    let mut sq = 0.0;
                    for d in 0..z.ncols() {
                        let diff = z[[r, d]] - z[[s, d]];
                        sq += diff * diff;
                        grad[[r, d]] += 2.0 * t * diff;
                        grad[[s, d]] -= 2.0 * t * diff;
                    }
                    value += t * sq;
                }
            }
        }
        (value, grad)
    }
}

fn gather(z: ArrayView2<'_, f64>, rows: &[usize]) -> Array2<f64> {
    let mut out = Array2::zeros((rows.len(), z.ncols()));
    for (r, &i) in rows.iter().enumerate() {
        out.row_mut(r).assign(&z.row(i));
    }
    out
}

/// Solves one uniform-marginal transport problem per consecutive pair of
/// the stages present in `labels`.
pub fn stage_progression(z: ArrayView2<'_, f64>, labels: &[usize], config: &TransportConfig) -> Result<StageProgression> {
    if labels.len() != z.nrows() {
        return Err(TransportError::DimensionMismatch(format!(
            "{} labels for {} rows",
            labels.len(),
            z.nrows()
        )));
    }
    if labels.is_empty() {
        return Err(TransportError::EmptyStage);
    }
    let stages: Vec<usize> = labels.iter().copied().collect::<BTreeSet<_>>().into_iter().collect();
    if stages.len() < 2 {
        return Err(TransportError::SingleStage);
    }
    let members: Vec<Vec<usize>> = stages
        .iter()
        .map(|&s| (0..labels.len()).filter(|&i| labels[i] == s).collect())
        .collect();
    let mut pairs = Vec::with_capacity(stages.len() - 1);
    for p in 0..stages.len() - 1 {
        let za = gather(z, &members[p]);
        let zb = gather(z, &members[p + 1]);
        let cost = cost_matrix(za.view(), zb.view())?;
        let a = Array1::from_elem(za.nrows(), 1.0 / za.nrows() as f64);
        let b = Array1::from_elem(zb.nrows(), 1.0 / zb.nrows() as f64);
        let lambda = config.regularization.resolve(cost.view());
        let plan = sinkhorn(cost.view(), a.view(), b.view(), lambda, config.eps, config.t_max)?;
        pairs.push(StagePair {
            source: stages[p],
            target: stages[p + 1],
            plan,
        });
    }
    Ok(StageProgression { stages, members, pairs })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn uniform(n: usize) -> Array1<f64> {
        Array1::from_elem(n, 1.0 / n as f64)
    }

    #[test]
    fn cost_hand_cases() {
        assert_eq!(cost_matrix(array![[1.0, 2.0]].view(), array![[1.0, 2.0]].view()).unwrap(), array![[0.0]]);
        assert_eq!(cost_matrix(array![[0.0]].view(), array![[3.0]].view()).unwrap(), array![[9.0]]);
        assert!(cost_matrix(array![[0.0]].view(), array![[3.0, 1.0]].view()).is_err());
    }

    #[test]
    fn inner_product_cases() {
        let t = Array2::<f64>::eye(2) / 2.0;
        let c = array![[0.0, 1.0], [1.0, 0.0]];
        assert_eq!(transport_cost(t.view(), c.view()).unwrap(), 0.0);
        assert_eq!(transport_cost(c.view(), Array2::zeros((2, 2)).view()).unwrap(), 0.0);
    }

    #[test]
    fn zero_cost_gives_product_coupling() {
        let c = Array2::zeros((3, 2));
        let a = array![0.2, 0.3, 0.5];
        let b = array![0.6, 0.4];
        let t = sinkhorn(c.view(), a.view(), b.view(), 0.5, 1e-12, 100).unwrap();
        for i in 0..3 {
            for j in 0..2 {
                assert!((t.plan[[i, j]] - a[i] * b[j]).abs() < 1e-15);
            }
        }
        assert_eq!(t.cost, 0.0);
        assert!(t.converged);
    }

    #[test]
    fn single_point_problem() {
        let c = array![[2.5]];
        let one = array![1.0];
        let t = sinkhorn(c.view(), one.view(), one.view(), 0.1, 1e-12, 10).unwrap();
        assert!((t.plan[[0, 0]] - 1.0).abs() < 1e-15);
        assert!((t.cost - 2.5).abs() < 1e-14);
    }

    #[test]
    fn plain_and_log_domains_agree() {
        let c = Array2::from_shape_fn((5, 4), |(i, j)| ((i * 7 + j * 3) % 5) as f64 * 0.4 + 0.1);
        let (a, b) = (uniform(5), uniform(4));
        let p = sinkhorn_plain(c.view(), a.view(), b.view(), 0.3, 1e-13, 10_000).unwrap();
        let l = sinkhorn_log(c.view(), a.view(), b.view(), 0.3, 1e-13, 10_000).unwrap();
        for (x, y) in p.plan.iter().zip(l.plan.iter()) {
            assert!((x - y).abs() < 1e-8);
        }
        assert!(!p.log_domain && l.log_domain);
    }

    #[test]
    fn small_lambda_switches_to_log_domain() {
        let c = array![[0.0, 1.0], [1.0, 0.0]];
        let t = sinkhorn(c.view(), uniform(2).view(), uniform(2).view(), 1e-4, 1e-9, 100).unwrap();
        assert!(t.log_domain);
        assert!(t.cost < 1e-12);
        assert!((t.plan[[0, 0]] - 0.5).abs() < 1e-9);
    }

    #[test]
    fn marginal_validation() {
        let c = Array2::zeros((2, 2));
        let bad = array![1.0, 0.0];
        assert_eq!(
            sinkhorn(c.view(), bad.view(), uniform(2).view(), 1.0, 1e-9, 10).unwrap_err(),
            TransportError::NonPositiveMarginal(1)
        );
        let unnorm = array![0.5, 0.6];
        assert!(matches!(
            sinkhorn(c.view(), unnorm.view(), uniform(2).view(), 1.0, 1e-9, 10),
            Err(TransportError::UnnormalizedMarginal(_))
        ));
        assert_eq!(
            sinkhorn(c.view(), uniform(2).view(), uniform(2).view(), 0.0, 1e-9, 10).unwrap_err(),
            TransportError::InvalidLambda(0.0)
        );
    }

    #[test]
    fn stage_pairing() {
        let z = array![[0.0], [0.1], [1.0], [1.1], [2.0], [2.2]];
        let labels = [2, 2, 0, 0, 1, 1];
        let prog = stage_progression(z.view(), &labels, &TransportConfig::default()).unwrap();
        assert_eq!(prog.stages, vec![0, 1, 2]);
        let keys: Vec<(usize, usize)> = prog.pairs.iter().map(|p| (p.source, p.target)).collect();
        assert_eq!(keys, vec![(0, 1), (1, 2)]);
        assert_eq!(
            stage_progression(z.view(), &[1; 6], &TransportConfig::default()).unwrap_err(),
            TransportError::SingleStage
        );
    }

    #[test]
    fn fixed_plan_gradient_matches_finite_differences() {
        let z = array![[0.0, 0.3], [0.1, -0.2], [1.0, 0.5], [1.4, 0.1], [0.7, 0.9]];
        let labels = [0, 0, 1, 1, 1];
        let prog = stage_progression(z.view(), &labels, &TransportConfig::default()).unwrap();
        let (value, grad) = prog.fixed_plan_cost_and_grad(z.view());
        assert!((value - prog.total_cost()).abs() < 1e-12);
        let h = 1e-6;
        for i in 0..z.nrows() {
            for d in 0..z.ncols() {
                let mut zp = z.clone();
                zp[[i, d]] += h;
                let mut zm = z.clone();
                zm[[i, d]] -= h;
                let fd = (prog.fixed_plan_cost_and_grad(zp.view()).0 - prog.fixed_plan_cost_and_grad(zm.view()).0)
                    / (2.0 * h);
                assert!((fd - grad[[i, d]]).abs() < 1e-8);
            }
        }
    }
}
