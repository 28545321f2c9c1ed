//! k-NN affinity graph with locally scaled Gaussian weights and the
//! symmetric normalised operator `S = D^{-1/2} W D^{-1/2}`.
//!
//! Bandwidths are per node: `σ_i` is the mean (unsquared) distance from
//! node `i` to its `k` nearest neighbours, and an edge `(i, j)` present in
//! either node's neighbour list gets weight `exp(-‖z_i - z_j‖² / (2 σ_i σ_j))`.

use ndarray::{Array2, ArrayView2};
use thiserror::Error;

use crate::sparse::CsrMatrix;

/// Lower bound on σ_i when all k neighbours coincide with node i.
pub const SIGMA_FLOOR: f64 = 1e-12;

#[derive(Debug, Error, PartialEq)]
pub enum GraphError {
    #[error("k = {k} must be below the node count {n}")]
    KTooLarge { k: usize, n: usize },
    #[error("k must be at least 1")]
    ZeroK,
    #[error("need at least two points, got {0}")]
    TooFewPoints(usize),
    #[error("node {0} has zero degree")]
    IsolatedNode(usize),
    #[error("bandwidth of node {0} is not positive")]
    NonPositiveSigma(usize),
}

pub type Result<T> = std::result::Result<T, GraphError>;

/// Squared Euclidean distances between all rows of `z`.
pub fn pairwise_sq_dists(z: ArrayView2<'_, f64>) -> Array2<f64> {
    let n = z.nrows();
    let mut out = Array2::zeros((n, n));
    for i in 0..n {
        for j in (i + 1)..n {
            let d: f64 = z
                .row(i)
                .iter()
                .zip(z.row(j).iter())
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            out[[i, j]] = d;
            out[[j, i]] = d;
        }
    }
    out
}

/// Neighbour lists (self excluded, ties to the lower index) and adaptive
/// bandwidths from a squared-distance matrix.
pub fn knn_with_sigma(sq_dists: ArrayView2<'_, f64>, k: usize) -> Result<(Vec<Vec<usize>>, Vec<f64>)> {
    let n = sq_dists.nrows();
    if k == 0 {
        return Err(GraphError::ZeroK);
    }
    if k >= n {
        return Err(GraphError::KTooLarge { k, n });
    }
    let mut neighbors = Vec::with_capacity(n);
    let mut sigmas = Vec::with_capacity(n);
    let mut candidates: Vec<usize> = Vec::with_capacity(n - 1);
    for i in 0..n {
        candidates.clear();
        candidates.extend((0..n).filter(|&j| j != i));
        let row = sq_dists.row(i);
        let key = |&a: &usize, &b: &usize| row[a].total_cmp(&row[b]).then(a.cmp(&b));
        candidates.select_nth_unstable_by(k - 1, key);
        let mut nearest = candidates[..k].to_vec();
        nearest.sort_by(key);
        let mean = nearest.iter().map(|&j| row[j].sqrt()).sum::<f64>() / k as f64;
        sigmas.push(mean.max(SIGMA_FLOOR));
        neighbors.push(nearest);
    }
    Ok((neighbors, sigmas))
}

/// Symmetric affinity matrix on the union of the k-NN relations.
pub fn build_affinity(
    sq_dists: ArrayView2<'_, f64>,
    neighbors: &[Vec<usize>],
    sigmas: &[f64],
) -> Result<CsrMatrix> {
    let n = neighbors.len();
    if let Some(i) = sigmas.iter().position(|&s| !(s > 0.0)) {
        return Err(GraphError::NonPositiveSigma(i));
    }
    let mut rows: Vec<Vec<usize>> = vec![Vec::new(); n];
    for (i, list) in neighbors.iter().enumerate() {
        for &j in list {
            if j != i {
                rows[i].push(j);
                rows[j].push(i);
            }
        }
    }
    let rows = rows
        .into_iter()
        .enumerate()
        .map(|(i, mut cols)| {
            cols.sort_unstable();
            cols.dedup();
            cols.into_iter()
                .map(|j| {
                    // Evaluate on the ordered pair so that w_ij and w_ji are bitwise equal.
                    let (a, b) = if i < j { (i, j) } else { (j, i) };
                    let w = (-sq_dists[[a, b]] / (2.0 * sigmas[a] * sigmas[b])).exp();
                    (j, w)
                })
                .collect()
        })
        .collect();
    Ok(CsrMatrix::from_rows(rows))
}

/// `S_ij = W_ij / sqrt(d_i d_j)`; returns `S` and the degree vector.
pub fn normalize(weights: &CsrMatrix) -> Result<(CsrMatrix, Vec<f64>)> {
    let degrees: Vec<f64> = (0..weights.n()).map(|i| weights.row_sum(i)).collect();
    if let Some(i) = degrees.iter().position(|&d| !(d > 0.0)) {
        return Err(GraphError::IsolatedNode(i));
    }
    let inv_sqrt: Vec<f64> = degrees.iter().map(|d| 1.0 / d.sqrt()).collect();
    let s = weights.map_entries(|i, j, w| {
        let (a, b) = if i < j { (i, j) } else { (j, i) };
        w * inv_sqrt[a] * inv_sqrt[b]
    });
    Ok((s, degrees))
}

/// Finished graph over a latent matrix.
#[derive(Clone, Debug)]
pub struct AffinityGraph {
    pub weights: CsrMatrix,
    pub degrees: Vec<f64>,
    pub normalized: CsrMatrix,
    pub neighbors: Vec<Vec<usize>>,
    pub sigmas: Vec<f64>,
}

impl AffinityGraph {
    pub fn build(z: ArrayView2<'_, f64>, k: usize) -> Result<Self> {
        if z.nrows() < 2 {
            return Err(GraphError::TooFewPoints(z.nrows()));
        }
        let sq = pairwise_sq_dists(z);
        Self::from_sq_dists(sq.view(), k)
    }

    pub fn from_sq_dists(sq: ArrayView2<'_, f64>, k: usize) -> Result<Self> {
        let (neighbors, sigmas) = knn_with_sigma(sq, k)?;
        let weights = build_affinity(sq, &neighbors, &sigmas)?;
        let (normalized, degrees) = normalize(&weights)?;
        Ok(Self {
            weights,
            degrees,
            normalized,
            neighbors,
            sigmas,
        })
    }

    pub fn n(&self) -> usize {
        self.weights.n()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn hand_distance() {
        let z = array![[0.0, 0.0], [3.0, 4.0], [0.0, 0.0]];
        let d = pairwise_sq_dists(z.view());
        assert_eq!(d[[0, 1]], 25.0);
        assert_eq!(d[[0, 2]], 0.0);
        assert_eq!(d[[1, 1]], 0.0);
    }

    #[test]
    fn collinear_neighbours_and_sigmas() {
        let z = array![[0.0], [1.0], [3.0]];
        let d = pairwise_sq_dists(z.view());
        let (nb, sig) = knn_with_sigma(d.view(), 1).unwrap();
        assert_eq!(nb, vec![vec![1], vec![0], vec![1]]);
        assert_eq!(sig, vec![1.0, 1.0, 2.0]);
    }

    #[test]
    fn duplicate_points_hit_sigma_floor() {
        let z = Array2::from_elem((4, 2), 1.5);
        let d = pairwise_sq_dists(z.view());
        let (_, sig) = knn_with_sigma(d.view(), 2).unwrap();
        assert!(sig.iter().all(|&s| s == SIGMA_FLOOR));
        let w = build_affinity(d.view(), &knn_with_sigma(d.view(), 2).unwrap().0, &sig).unwrap();
        assert_eq!(w.get(0, 1), 1.0);
    }

    #[test]
    fn k_validation() {
        let d = Array2::zeros((3, 3));
        assert_eq!(
            knn_with_sigma(d.view(), 3).unwrap_err(),
            GraphError::KTooLarge { k: 3, n: 3 }
        );
        assert_eq!(knn_with_sigma(d.view(), 0).unwrap_err(), GraphError::ZeroK);
    }

    #[test]
    fn kernel_values() {
        // Two points at squared distance 2, each with σ = √2: w = e^{-1/2}.
        let z = array![[0.0, 0.0], [1.0, 1.0]];
        let g = AffinityGraph::build(z.view(), 1).unwrap();
        assert_eq!(g.sigmas, vec![2f64.sqrt(), 2f64.sqrt()]);
        let expected = (-2.0f64 / (2.0 * 2f64.sqrt() * 2f64.sqrt())).exp();
        assert_eq!(g.weights.get(0, 1), expected);
        assert!((expected - (-0.5f64).exp()).abs() < 1e-15);
        assert_eq!(g.weights.get(0, 0), 0.0);
        // A 2-node graph normalises to an off-diagonal of exactly 1.
        assert!((g.normalized.get(0, 1) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn isolated_node_rejected() {
        let w = CsrMatrix::from_rows(vec![vec![(1, 1.0)], vec![(0, 1.0)], vec![]]);
        assert_eq!(normalize(&w).unwrap_err(), GraphError::IsolatedNode(2));
    }

    #[test]
    fn regular_graph_normalises_by_degree() {
        // 4-cycle with unit weights: every degree is 2.
        let w = CsrMatrix::from_rows(vec![
            vec![(1, 1.0), (3, 1.0)],
            vec![(0, 1.0), (2, 1.0)],
            vec![(1, 1.0), (3, 1.0)],
            vec![(0, 1.0), (2, 1.0)],
        ]);
        let (s, deg) = normalize(&w).unwrap();
        assert_eq!(deg, vec![2.0; 4]);
        let diff = s.to_dense() - w.to_dense() / 2.0;
        assert!(diff.iter().all(|d| d.abs() < 1e-15));
    }
}
