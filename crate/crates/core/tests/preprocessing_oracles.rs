use lpot::dataset::{FeatureTable, Modality};
use lpot::preprocessing::{knn_impute, quality_filter, robust_scale};
use ndarray::Array2;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_table(n: usize, d: usize, rate: f64, seed: u64) -> FeatureTable {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let values = Array2::from_shape_fn((n, d), |_| rng.random_range(-5.0..5.0));
    let mut missing = Array2::from_shape_fn((n, d), |_| rng.random_bool(rate));
    // Keep at least one observed cell per column.
    for j in 0..d {
        missing[[j % n, j]] = false;
    }
    let values = Array2::from_shape_fn((n, d), |(i, j)| if missing[[i, j]] { f64::NAN } else { values[[i, j]] });
    FeatureTable::new(
        values,
        missing,
        (0..d).map(|j| format!("f{j}")).collect(),
        vec![Modality::Mri; d],
    )
    .unwrap()
}

/// Direct transcription of the imputation rule: for a missing cell, rank
/// every other row observing the column by the rescaled distance over
/// co-observed features, ties by row index, and average the first `k`.
fn oracle_impute(t: &FeatureTable, k: usize) -> Array2<f64> {
    let (n, d) = t.values.dim();
    let mut out = t.values.clone();
    for i in 0..n {
        for j in 0..d {
            if !t.missing[[i, j]] {
                continue;
            }
            let mut donors: Vec<(f64, usize)> = Vec::new();
            for l in 0..n {
                if l == i || t.missing[[l, j]] {
                    continue;
                }
                let mut sum = 0.0;
                let mut overlap = 0;
                for q in 0..d {
                    if !t.missing[[i, q]] && !t.missing[[l, q]] {
                        let diff = t.values[[i, q]] - t.values[[l, q]];
                        sum += diff * diff;
                        overlap += 1;
                    }
                }
                let dist = if overlap == 0 {
                    f64::INFINITY
                } else {
                    (sum * d as f64 / overlap as f64).sqrt()
                };
                donors.push((dist, l));
            }
            donors.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
            let chosen: Vec<f64> = donors.iter().take(k).map(|&(_, l)| t.values[[l, j]]).collect();
            out[[i, j]] = chosen.iter().sum::<f64>() / chosen.len() as f64;
        }
    }
    out
}

#[test]
fn imputation_matches_brute_force() {
    for seed in 0..50 {
        let t = random_table(10, 6, 0.25, seed);
        for k in [1, 3, 5, 20] {
            let got = knn_impute(&t, k).unwrap();
            let want = oracle_impute(&t, k);
            assert_eq!(got, want, "seed {seed} k {k}");
        }
    }
}

#[test]
fn imputation_hand_case() {
    // Row 0 misses column 2. Rows 1 and 2 are at rescaled distances
    // sqrt(3/2 * 1) and sqrt(3/2 * 16); with k = 1 row 1 donates.
    let nan = f64::NAN;
    let values = ndarray::array![[0.0, 0.0, nan], [1.0, 0.0, 10.0], [4.0, 0.0, 20.0]];
    let missing = values.mapv(f64::is_nan);
    let t = FeatureTable::new(values, missing, vec!["a".into(), "b".into(), "c".into()], vec![Modality::Csf; 3]).unwrap();
    assert_eq!(knn_impute(&t, 1).unwrap()[[0, 2]], 10.0);
    assert_eq!(knn_impute(&t, 2).unwrap()[[0, 2]], 15.0);
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

#[test]
fn scaled_columns_have_zero_median() {
    for seed in 0..30 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rng.random_range(2..40);
        let x = Array2::from_shape_fn((n, 5), |_| rng.random_range(-100.0..100.0));
        let (scaled, params) = robust_scale(x.view());
        for j in 0..5 {
            let m = median(scaled.column(j).to_vec());
            assert!(m.abs() <= 1e-12, "seed {seed} col {j}: {m}");
            assert!((params.medians[j] - median(x.column(j).to_vec())).abs() <= 1e-12);
        }
    }
}

#[test]
fn constant_columns_map_to_zero() {
    let mut x = Array2::from_shape_fn((9, 3), |(i, j)| (i * (j + 1)) as f64);
    x.column_mut(1).fill(7.5);
    // Most of the column is constant, so the IQR is zero too.
    for i in 0..7 {
        x[[i, 2]] = -2.0;
    }
    let (scaled, params) = robust_scale(x.view());
    assert!(scaled.column(1).iter().all(|&v| v == 0.0));
    assert_eq!(params.iqrs[1], 1.0);
    assert_eq!(params.iqrs[2], 1.0);
    assert!(scaled.column(2).iter().take(7).all(|&v| v == 0.0));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn imputation_fills_only_missing_cells(seed in 0u64..100_000, n in 2usize..15, d in 1usize..7, k in 1usize..6) {
        let t = random_table(n, d, 0.3, seed);
        let out = knn_impute(&t, k).unwrap();
        for i in 0..n {
            for j in 0..d {
                prop_assert!(out[[i, j]].is_finite());
                if !t.missing[[i, j]] {
                    prop_assert_eq!(out[[i, j]], t.values[[i, j]]);
                } else {
                    let col: Vec<f64> = (0..n).filter(|&l| !t.missing[[l, j]]).map(|l| t.values[[l, j]]).collect();
                    let lo = col.iter().copied().fold(f64::INFINITY, f64::min);
                    let hi = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    prop_assert!(out[[i, j]] >= lo - 1e-12 && out[[i, j]] <= hi + 1e-12);
                }
            }
        }
    }

    #[test]
    fn quality_filter_partitions_rows(seed in 0u64..100_000, n in 1usize..30, threshold in 0.0f64..1.0) {
        let t = random_table(n, 6, 0.4, seed);
        match quality_filter(&t, threshold) {
            Ok((kept, removed)) => {
                prop_assert_eq!(kept.n_rows() + removed.len(), n);
                for &r in &removed {
                    let miss = t.missing.row(r).iter().filter(|&&m| m).count() as f64 / 6.0;
                    prop_assert!(miss > threshold);
                }
                for i in 0..kept.n_rows() {
                    let miss = kept.missing.row(i).iter().filter(|&&m| m).count() as f64 / 6.0;
                    prop_assert!(miss <= threshold);
                }
            }
            Err(_) => {
                for i in 0..n {
                    let miss = t.missing.row(i).iter().filter(|&&m| m).count() as f64 / 6.0;
                    prop_assert!(miss > threshold);
                }
            }
        }
    }

    #[test]
    fn scaling_is_affine_invariant(seed in 0u64..100_000, shift in -50.0f64..50.0, scale in 0.5f64..4.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Array2::from_shape_fn((15, 3), |_| rng.random_range(-10.0..10.0));
        let (a, _) = robust_scale(x.view());
        let (b, _) = robust_scale(x.mapv(|v| v * scale + shift).view());
        for (u, v) in a.iter().zip(b.iter()) {
            prop_assert!((u - v).abs() < 1e-9);
        }
    }
}
