//! Pointwise similarity controls and estimator-quality summaries.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::Group;
use crate::error::{HolonomyError, Result};
use crate::holonomy::HolonomyResult;
use crate::linalg::{center_rows, gaussian_vector};
use crate::loops::InputLoop;
use crate::models::Featurizer;
use crate::transport::procrustes_so;

#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityReport {
    pub cka: f64,
    pub alignment_residual: f64,
    pub n_samples: usize,
}

fn column_centered(z: &DMatrix<f64>) -> DMatrix<f64> {
    let mean = DVector::from_fn(z.ncols(), |j, _| z.column(j).mean());
    center_rows(z, &mean)
}

/// Linear CKA with simple (biased) centering,
/// `⟨K, L⟩_F / (‖K‖_F ‖L‖_F)` for `K = Z̄₁Z̄₁ᵀ`, `L = Z̄₂Z̄₂ᵀ`.
pub fn linear_cka(z1: &DMatrix<f64>, z2: &DMatrix<f64>) -> Result<f64> {
    if z1.nrows() != z2.nrows() {
        return Err(HolonomyError::DimensionMismatch {
            context: "cka samples",
            expected: z1.nrows(),
            found: z2.nrows(),
        });
    }
    if z1.nrows() < 2 {
        return Err(HolonomyError::InvalidArgument("cka needs N ≥ 2".into()));
    }
    let a = column_centered(z1);
    let b = column_centered(z2);
    if a.norm() == 0.0 || b.norm() == 0.0 {
        return Err(HolonomyError::DegenerateInput(
            "centered representation is identically zero".into(),
        ));
    }
    // Feature-space form avoids the N×N Gram matrices.
    let cross = (a.transpose() * &b).norm_squared();
    let self_a = (a.transpose() * &a).norm();
    let self_b = (b.transpose() * &b).norm();
    Ok(cross / (self_a * self_b))
}

/// Orthogonal `Q` minimizing `‖Z₁Q − Z₂‖_F` over O(p), and the misfit
/// relative to `‖Z₁‖_F`.
pub fn orthogonal_alignment(z1: &DMatrix<f64>, z2: &DMatrix<f64>) -> Result<(DMatrix<f64>, f64)> {
    if z1.shape() != z2.shape() {
        return Err(HolonomyError::DimensionMismatch {
            context: "alignment inputs",
            expected: z1.ncols(),
            found: z2.ncols(),
        });
    }
    let n = z1.nrows();
    let w = DVector::from_element(n, 1.0);
    let sol = procrustes_so(z1, z2, &w, Group::Orthogonal)?;
    let norm = z1.norm();
    if norm == 0.0 {
        return Err(HolonomyError::DegenerateInput("source representation is zero".into()));
    }
    let residual = (z1 * &sol.rotation - z2).norm() / norm;
    Ok((sol.rotation, residual))
}

pub fn similarity_report(z1: &DMatrix<f64>, z2: &DMatrix<f64>) -> Result<SimilarityReport> {
    let (_, alignment_residual) = orthogonal_alignment(z1, z2)?;
    Ok(SimilarityReport {
        cka: linear_cka(z1, z2)?,
        alignment_residual,
        n_samples: z1.nrows(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct EdgeQuality {
    pub mean_iou: f64,
    pub min_iou: f64,
    pub min_var_captured: f64,
    /// Largest finite-difference Jacobian discrepancy across edges, when a
    /// map and loop were supplied.
    pub curvature_proxy: Option<f64>,
}

/// Mean over `min(d, 8)` seeded unit probes `u` of
/// `‖(z(b + δ) − z(b)) − (z(a + δ) − z(a))‖ / ‖δ‖`, `δ = h u`,
/// `h = 1e-4 (1 + ‖a‖)`.
pub fn jacobian_discrepancy(map: &dyn Featurizer, a: &DVector<f64>, b: &DVector<f64>, seed: u64) -> Result<f64> {
    let d = a.len();
    let n_probes = d.min(8);
    let step = 1e-4 * (1.0 + a.norm());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let za = map.eval(a)?;
    let zb = map.eval(b)?;
    let mut total = 0.0;
    for _ in 0..n_probes {
        let mut u = gaussian_vector(&mut rng, d);
        u /= u.norm();
        let delta = u * step;
        let da = map.eval(&(a + &delta))? - &za;
        let db = map.eval(&(b + &delta))? - &zb;
        total += (db - da).norm() / step;
    }
    Ok(total / n_probes as f64)
}

pub fn edge_quality(
    result: &HolonomyResult,
    probe: Option<(&dyn Featurizer, &InputLoop)>,
    seed: u64,
) -> Result<EdgeQuality> {
    let ious: Vec<f64> = result.edges.iter().map(|e| e.iou_next).collect();
    let curvature_proxy = match probe {
        None => None,
        Some((map, lp)) => {
            let mut worst = 0.0f64;
            for w in lp.points.windows(2) {
                worst = worst.max(jacobian_discrepancy(map, &w[0], &w[1], seed)?);
            }
            Some(worst)
        }
    };
    Ok(EdgeQuality {
        mean_iou: result.mean_iou(),
        min_iou: ious.iter().copied().fold(1.0, f64::min),
        min_var_captured: result.min_var_captured(),
        curvature_proxy,
    })
}
