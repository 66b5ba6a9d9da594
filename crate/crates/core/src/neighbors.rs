//! Shared-midpoint neighbor selection, soft weights and soft centering.

use std::collections::HashSet;

use nalgebra::{DMatrix, DVector};

use crate::error::{HolonomyError, Result};
use crate::linalg::{center_rows, median, select_rows, weighted_row_mean};

/// One edge's neighborhood: rows, soft weights and the centered cloud.
#[derive(Debug, Clone, PartialEq)]
pub struct EdgeContext {
    pub indices: Vec<usize>,
    pub midpoint: DVector<f64>,
    pub weights: DVector<f64>,
    pub soft_center: DVector<f64>,
    pub centered_cloud: DMatrix<f64>,
    pub sigma: f64,
}

/// Exact k nearest rows to `query` under Euclidean distance, ordered by
/// (distance, row id).
pub fn knn(pool: &DMatrix<f64>, query: &DVector<f64>, k: usize) -> Result<Vec<usize>> {
    let n = pool.nrows();
    if k > n {
        return Err(HolonomyError::KTooLarge { k, n });
    }
    if query.len() != pool.ncols() {
        return Err(HolonomyError::DimensionMismatch {
            context: "knn query",
            expected: pool.ncols(),
            found: query.len(),
        });
    }
    let mut keyed: Vec<(f64, usize)> = (0..n)
        .map(|i| {
            let d2 = pool
                .row(i)
                .iter()
                .zip(query.iter())
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>();
            (d2, i)
        })
        .collect();
    let cmp = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
    if k < n {
        keyed.select_nth_unstable_by(k, cmp);
        keyed.truncate(k);
    }
    keyed.sort_by(cmp);
    Ok(keyed.into_iter().map(|(_, i)| i).collect())
}

/// Weights `w_j ∝ exp(-d_j / σ)` with `σ` the median distance to the
/// midpoint (mean if the median vanishes; uniform if every distance is 0).
pub fn soft_weights(rows: &DMatrix<f64>, midpoint: &DVector<f64>) -> (DVector<f64>, f64) {
    let k = rows.nrows();
    assert!(k >= 1, "soft weights need at least one row");
    let dists: Vec<f64> = (0..k)
        .map(|j| {
            rows.row(j)
                .iter()
                .zip(midpoint.iter())
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt()
        })
        .collect();
    let mut sigma = median(&dists);
    if sigma <= 0.0 {
        sigma = dists.iter().sum::<f64>() / k as f64;
    }
    if sigma <= 0.0 {
        return (DVector::from_element(k, 1.0 / k as f64), 0.0);
    }
    let d_min = dists.iter().copied().fold(f64::INFINITY, f64::min);
    let raw = DVector::from_iterator(k, dists.iter().map(|d| (-(d - d_min) / sigma).exp()));
    let total = raw.sum();
    (raw / total, sigma)
}

impl EdgeContext {
    /// Context for the rows nearest to `anchor`, weighted at `anchor`.
    pub fn at(pool: &DMatrix<f64>, anchor: &DVector<f64>, k: usize) -> Result<Self> {
        let indices = knn(pool, anchor, k)?;
        let rows = select_rows(pool, &indices);
        let (weights, sigma) = soft_weights(&rows, anchor);
        let soft_center = weighted_row_mean(&rows, &weights);
        let centered_cloud = center_rows(&rows, &soft_center);
        Ok(Self {
            indices,
            midpoint: anchor.clone(),
            weights,
            soft_center,
            centered_cloud,
            sigma,
        })
    }

    /// Same rows and weights, different row values (e.g. the shared rows
    /// re-evaluated at an endpoint); recenters with the shared weights.
    pub fn with_rows(&self, rows: &DMatrix<f64>) -> Self {
        assert_eq!(rows.nrows(), self.indices.len());
        let soft_center = weighted_row_mean(rows, &self.weights);
        Self {
            soft_center: soft_center.clone(),
            centered_cloud: center_rows(rows, &soft_center),
            ..self.clone()
        }
    }

    /// Same rows, but centered with weights anchored at `anchor`.
    pub fn recentered_at(&self, pool: &DMatrix<f64>, anchor: &DVector<f64>) -> Self {
        let rows = select_rows(pool, &self.indices);
        let (w, _) = soft_weights(&rows, anchor);
        let soft_center = weighted_row_mean(&rows, &w);
        Self {
            soft_center: soft_center.clone(),
            centered_cloud: center_rows(&rows, &soft_center),
            ..self.clone()
        }
    }

    pub fn k(&self) -> usize {
        self.indices.len()
    }
}

/// Shared context of the edge `(a, b)`: one neighbor set and one soft
/// center, both anchored at the midpoint.
pub fn shared_edge_context(pool: &DMatrix<f64>, a: &DVector<f64>, b: &DVector<f64>, k: usize) -> Result<EdgeContext> {
    if a.len() != b.len() {
        return Err(HolonomyError::DimensionMismatch {
            context: "edge endpoints",
            expected: a.len(),
            found: b.len(),
        });
    }
    let midpoint = (a + b) * 0.5;
    EdgeContext::at(pool, &midpoint, k)
}

/// Per-endpoint contexts (the separate-neighbor ablation).
pub fn separate_edge_contexts(
    pool: &DMatrix<f64>,
    a: &DVector<f64>,
    b: &DVector<f64>,
    k: usize,
) -> Result<(EdgeContext, EdgeContext)> {
    Ok((EdgeContext::at(pool, a, k)?, EdgeContext::at(pool, b, k)?))
}

/// Intersection-over-union of two index sets.
pub fn index_iou(a: &[usize], b: &[usize]) -> f64 {
    let sa: HashSet<usize> = a.iter().copied().collect();
    let sb: HashSet<usize> = b.iter().copied().collect();
    let union = sa.union(&sb).count();
    if union == 0 {
        return 1.0;
    }
    sa.intersection(&sb).count() as f64 / union as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{gaussian_matrix, gaussian_vector, random_orthogonal};
    use nalgebra::{dmatrix, dvector};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn planar_knn() {
        let pool = dmatrix![0.0, 0.0; 1.0, 0.0; 3.0, 0.0];
        assert_eq!(knn(&pool, &dvector![0.1, 0.0], 2).unwrap(), vec![0, 1]);
        assert_eq!(knn(&pool, &dvector![3.0, 0.0], 1).unwrap(), vec![2]);
        assert!(matches!(
            knn(&pool, &dvector![0.0, 0.0], 4),
            Err(HolonomyError::KTooLarge { k: 4, n: 3 })
        ));
    }

    #[test]
    fn ties_go_to_lower_id() {
        let pool = dmatrix![1.0, 0.0; 5.0, 5.0; 1.0, 0.0; -1.0, 0.0; 1.0, 0.0];
        let first = knn(&pool, &dvector![0.0, 0.0], 3).unwrap();
        assert_eq!(first, vec![0, 2, 3]);
        for _ in 0..5 {
            assert_eq!(knn(&pool, &dvector![0.0, 0.0], 3).unwrap(), first);
        }
        assert_eq!(knn(&pool, &dvector![1.0, 0.0], 2).unwrap(), vec![0, 2]);
    }

    #[test]
    fn equidistant_rows_get_uniform_weights() {
        let rows = dmatrix![1.0, 0.0; 0.0, 1.0; -1.0, 0.0; 0.0, -1.0];
        let (w, sigma) = soft_weights(&rows, &dvector![0.0, 0.0]);
        assert_eq!(sigma, 1.0);
        for v in w.iter() {
            assert!((v - 0.25).abs() < 1e-15);
        }
        let (w1, _) = soft_weights(&dmatrix![3.0, 4.0], &dvector![0.0, 0.0]);
        assert_eq!(w1.as_slice(), &[1.0]);
    }

    #[test]
    fn two_distance_softmin() {
        // distances 1 and 2: median 1.5
        let rows = dmatrix![1.0, 0.0; 0.0, 2.0];
        let (w, sigma) = soft_weights(&rows, &dvector![0.0, 0.0]);
        assert_eq!(sigma, 1.5);
        let e1 = (-1.0f64 / 1.5).exp();
        let e2 = (-2.0f64 / 1.5).exp();
        assert!((w[0] - e1 / (e1 + e2)).abs() < 1e-15);
        assert!((w[0] - 0.6607).abs() < 1e-3 && (w[1] - 0.3393).abs() < 1e-3);
    }

    #[test]
    fn degenerate_distances_fall_back() {
        // median 0 but mean positive
        let rows = dmatrix![0.0, 0.0; 0.0, 0.0; 3.0, 0.0];
        let (w, sigma) = soft_weights(&rows, &dvector![0.0, 0.0]);
        assert_eq!(sigma, 1.0);
        assert!((w.sum() - 1.0).abs() < 1e-12);
        let (w0, s0) = soft_weights(&dmatrix![2.0; 2.0], &dvector![2.0]);
        assert_eq!(s0, 0.0);
        assert_eq!(w0.as_slice(), &[0.5, 0.5]);
    }

    #[test]
    fn self_edge_matches_point_query() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let pool = gaussian_matrix(&mut rng, 200, 5);
        let a = gaussian_vector(&mut rng, 5);
        let shared = shared_edge_context(&pool, &a, &a, 20).unwrap();
        assert_eq!(shared, EdgeContext::at(&pool, &a, 20).unwrap());
    }

    #[test]
    fn context_invariants() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let pool = gaussian_matrix(&mut rng, 300, 4);
        let ctx = shared_edge_context(&pool, &gaussian_vector(&mut rng, 4), &gaussian_vector(&mut rng, 4), 30).unwrap();
        assert!((ctx.weights.sum() - 1.0).abs() <= 1e-12);
        assert!(ctx.weights.iter().all(|w| *w > 0.0));
        let rows = select_rows(&pool, &ctx.indices);
        let center = weighted_row_mean(&rows, &ctx.weights);
        assert!((center - &ctx.soft_center).amax() < 1e-15);
        assert!((center_rows(&rows, &ctx.soft_center) - &ctx.centered_cloud).amax() == 0.0);
        // the weighted centered cloud has zero weighted mean
        assert!(weighted_row_mean(&ctx.centered_cloud, &ctx.weights).amax() < 1e-14);
    }

    #[test]
    fn separate_mode_sets_differ_for_generic_edges() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let pool = gaussian_matrix(&mut rng, 400, 3);
        let a = gaussian_vector(&mut rng, 3);
        let b = gaussian_vector(&mut rng, 3);
        let (ca, cb) = separate_edge_contexts(&pool, &a, &b, 25).unwrap();
        assert_ne!(ca.indices, cb.indices);
        assert!(index_iou(&ca.indices, &cb.indices) < 1.0);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn knn_and_weights_orthogonally_equivariant(seed in 0u64..10_000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let pool = gaussian_matrix(&mut rng, 120, 6);
            let q = gaussian_vector(&mut rng, 6);
            let u = random_orthogonal(&mut rng, 6);
            let rotated_pool = &pool * u.transpose();
            let rotated_q = &u * &q;
            let a = EdgeContext::at(&pool, &q, 15).unwrap();
            let b = EdgeContext::at(&rotated_pool, &rotated_q, 15).unwrap();
            prop_assert_eq!(&a.indices, &b.indices);
            prop_assert!((&a.weights - &b.weights).amax() < 1e-12);
            prop_assert!((&u * &a.soft_center - &b.soft_center).amax() < 1e-12);
        }
    }
}
