//! Per-edge transport: joint subspace, weighted rotation-only Procrustes and
//! the embedding back into SO(p).
//!
//! Convention: rotations act on row vectors, source to target, so the
//! Procrustes solution satisfies `Xq · Rq ≈ Yq`.

use nalgebra::{DMatrix, DVector};

use crate::config::Group;
use crate::error::{HolonomyError, Result};
use crate::linalg::svd_sorted;
use crate::neighbors::EdgeContext;

/// Relative singular-value threshold for the numerical rank of the stack.
pub const RANK_TOL: f64 = 1e-8;
/// Cross-covariances whose top singular value falls below this fraction of
/// the cloud energy are treated as degenerate.
pub const DEGENERATE_TOL: f64 = 1e-14;

#[derive(Debug, Clone, PartialEq)]
pub struct JointSubspace {
    pub basis: DMatrix<f64>,
    pub q_effective: usize,
    pub var_captured: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProcrustesSolution {
    pub rotation: DMatrix<f64>,
    pub det_flipped: bool,
    /// The cross-covariance vanished and the identity was returned.
    pub degenerate: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EdgeTransport {
    pub rotation: DMatrix<f64>,
    pub basis: DMatrix<f64>,
    pub q_effective: usize,
    pub var_captured: f64,
    pub det_flipped: bool,
    pub degenerate: bool,
    pub group: Group,
}

/// Top right singular directions of the vertical stack `[X; Y]`.
pub fn joint_subspace(x: &DMatrix<f64>, y: &DMatrix<f64>, q: usize) -> Result<JointSubspace> {
    if q == 0 {
        return Err(HolonomyError::InvalidArgument("q must be positive".into()));
    }
    if x.ncols() != y.ncols() {
        return Err(HolonomyError::DimensionMismatch {
            context: "joint subspace clouds",
            expected: x.ncols(),
            found: y.ncols(),
        });
    }
    let p = x.ncols();
    let mut stack = DMatrix::zeros(x.nrows() + y.nrows(), p);
    stack.rows_mut(0, x.nrows()).copy_from(x);
    stack.rows_mut(x.nrows(), y.nrows()).copy_from(y);
    let svd = svd_sorted(&stack, false);
    let s = &svd.singular_values;
    let s_max = s.iter().copied().fold(0.0f64, f64::max);
    if s_max == 0.0 || !s_max.is_finite() {
        return Err(HolonomyError::DegenerateCloud);
    }
    let rank = s.iter().filter(|&&v| v > RANK_TOL * s_max).count();
    let q_eff = q.min(rank);
    let total: f64 = s.iter().map(|v| v * v).sum();
    let kept: f64 = s.iter().take(q_eff).map(|v| v * v).sum();
    let basis = svd.v_t.rows(0, q_eff).transpose();
    Ok(JointSubspace {
        basis,
        q_effective: q_eff,
        var_captured: kept / total,
    })
}

/// Weighted orthogonal Procrustes `argmin_R Σ_j w_j ‖x_j R − y_j‖²`.
///
/// With `Group::SpecialOrthogonal` a negative determinant is repaired by
/// negating the left singular vector of the smallest singular value.
pub fn procrustes_so(
    xq: &DMatrix<f64>,
    yq: &DMatrix<f64>,
    weights: &DVector<f64>,
    group: Group,
) -> Result<ProcrustesSolution> {
    if xq.shape() != yq.shape() {
        return Err(HolonomyError::DimensionMismatch {
            context: "procrustes clouds",
            expected: xq.nrows(),
            found: yq.nrows(),
        });
    }
    if weights.len() != xq.nrows() {
        return Err(HolonomyError::DimensionMismatch {
            context: "procrustes weights",
            expected: xq.nrows(),
            found: weights.len(),
        });
    }
    let q = xq.ncols();
    let mut weighted_y = yq.clone();
    for (j, mut row) in weighted_y.row_iter_mut().enumerate() {
        row *= weights[j];
    }
    let m = xq.transpose() * weighted_y;

    let energy_x: f64 = (0..xq.nrows()).map(|j| weights[j] * xq.row(j).norm_squared()).sum();
    let energy_y: f64 = (0..yq.nrows()).map(|j| weights[j] * yq.row(j).norm_squared()).sum();
    let scale = (energy_x * energy_y).sqrt();

    let svd = svd_sorted(&m, true);
    let top = svd.singular_values.iter().copied().fold(0.0f64, f64::max);
    // NaN energies count as degenerate.
    let informative = top > DEGENERATE_TOL * scale;
    if !informative || scale == 0.0 {
        return Ok(ProcrustesSolution {
            rotation: DMatrix::identity(q, q),
            det_flipped: false,
            degenerate: true,
        });
    }
    let mut u = svd.u;
    let mut rotation = &u * &svd.v_t;
    let mut det_flipped = false;
    if group == Group::SpecialOrthogonal && rotation.determinant() < 0.0 {
        u.column_mut(q - 1).neg_mut();
        rotation = &u * &svd.v_t;
        det_flipped = true;
    }
    Ok(ProcrustesSolution {
        rotation,
        det_flipped,
        degenerate: false,
    })
}

/// `B · Rq · Bᵀ + (I − B Bᵀ)`.
pub fn embed_rotation(basis: &DMatrix<f64>, rq: &DMatrix<f64>) -> DMatrix<f64> {
    let p = basis.nrows();
    let proj = basis * basis.transpose();
    basis * rq * basis.transpose() + DMatrix::identity(p, p) - proj
}

/// Rotation carrying the source context's cloud onto the target's, solved in
/// their joint q-subspace with the source's soft weights.
pub fn edge_transport(source: &EdgeContext, target: &EdgeContext, q: usize, group: Group) -> Result<EdgeTransport> {
    let x = &source.centered_cloud;
    let y = &target.centered_cloud;
    if x.shape() != y.shape() {
        return Err(HolonomyError::DimensionMismatch {
            context: "edge clouds",
            expected: x.ncols(),
            found: y.ncols(),
        });
    }
    let sub = joint_subspace(x, y, q)?;
    let xq = x * &sub.basis;
    let yq = y * &sub.basis;
    let sol = procrustes_so(&xq, &yq, &source.weights, group)?;
    Ok(EdgeTransport {
        rotation: embed_rotation(&sub.basis, &sol.rotation),
        basis: sub.basis,
        q_effective: sub.q_effective,
        var_captured: sub.var_captured,
        det_flipped: sol.det_flipped,
        degenerate: sol.degenerate,
        group,
    })
}
