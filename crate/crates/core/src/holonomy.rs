//! Loop composition, normalization, eigen-angles and the end-to-end
//! estimator.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::config::{CloudMode, EstimatorConfig, NeighborMode, WhiteningMode};
use crate::error::{HolonomyError, Result};
use crate::gauge::{fit_whitening, inverse_sqrt_psd, FeaturePool, WhiteningTransform};
use crate::linalg::{orthogonality_defect, polar_orthogonal, select_rows, svd_sorted, sym_eigen_desc, symmetrize};
use crate::loops::{self_loop, InputLoop, Motion};
use crate::models::Featurizer;
use crate::neighbors::{index_iou, separate_edge_contexts, shared_edge_context, EdgeContext};
use crate::transport::{edge_transport, EdgeTransport};

/// Composition drift above which `H` is projected back onto O(p).
pub const DRIFT_TOL: f64 = 1e-10;
/// Orthogonality defect beyond which eigen-angles are refused.
pub const ORTHO_TOL: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct EdgeDiagnostics {
    pub indices: Vec<usize>,
    pub sigma: f64,
    pub var_captured: f64,
    pub q_effective: usize,
    pub det_flipped: bool,
    pub degenerate: bool,
    /// IoU of this edge's neighbor set with the next edge's (cyclically).
    pub iou_next: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HolonomyResult {
    pub h: DMatrix<f64>,
    pub h_norm: f64,
    pub eigen_angles: Vec<f64>,
    pub edges: Vec<EdgeDiagnostics>,
    pub loop_id: String,
    pub config_hash: String,
    /// Frobenius size of the polar correction applied after composition
    /// (0 when none was needed).
    pub drift_correction: f64,
    /// Self-loop h_norm under the same configuration, when measured.
    pub bias_floor: Option<f64>,
}

impl HolonomyResult {
    pub fn max_eigen_angle(&self) -> f64 {
        self.eigen_angles.iter().map(|t| t.abs()).fold(0.0, f64::max)
    }

    pub fn mean_iou(&self) -> f64 {
        if self.edges.is_empty() {
            return 1.0;
        }
        self.edges.iter().map(|e| e.iou_next).sum::<f64>() / self.edges.len() as f64
    }

    pub fn min_var_captured(&self) -> f64 {
        self.edges.iter().map(|e| e.var_captured).fold(f64::INFINITY, f64::min)
    }
}

/// `H = R_{L−1} ⋯ R_0`, re-orthogonalized when drift exceeds [`DRIFT_TOL`].
/// Returns `H` and the size of the correction.
pub fn compose(edges: &[DMatrix<f64>]) -> Result<(DMatrix<f64>, f64)> {
    let p = edges
        .first()
        .map(|r| r.nrows())
        .ok_or_else(|| HolonomyError::InvalidArgument("cannot compose an empty edge list".into()))?;
    let mut h = DMatrix::identity(p, p);
    for r in edges {
        if r.shape() != (p, p) {
            return Err(HolonomyError::DimensionMismatch {
                context: "edge transport",
                expected: p,
                found: r.nrows(),
            });
        }
        h = r * h;
    }
    if orthogonality_defect(&h) > DRIFT_TOL {
        let fixed = polar_orthogonal(&h);
        let correction = (&fixed - &h).norm();
        return Ok((fixed, correction));
    }
    Ok((h, 0.0))
}

/// `‖H − I‖_F / (2√p)`.
pub fn h_norm(h: &DMatrix<f64>) -> f64 {
    let p = h.nrows();
    (h - DMatrix::<f64>::identity(p, p)).norm() / (2.0 * (p as f64).sqrt())
}

/// Normalized holonomy from an angle multiset.
pub fn h_norm_from_angles(angles: &[f64]) -> f64 {
    // 1 − cos θ = 2 sin²(θ/2), without the cancellation at small θ
    let s: f64 = angles.iter().map(|t| 2.0 * (0.5 * t).sin().powi(2)).sum();
    (2.0 * s).sqrt() / (2.0 * (angles.len() as f64).sqrt())
}

const SCHUR_EPS: f64 = 1e-15;
const SCHUR_MAX_ITER: usize = 30;
/// Cosines closer than this are resolved together in [`split_angles`].
const COS_CLUSTER_TOL: f64 = 1e-6;

fn real_angle(v: f64) -> f64 {
    if v < 0.0 {
        std::f64::consts::PI
    } else {
        0.0
    }
}

/// Angles read off the 1×1 and 2×2 diagonal blocks of a real Schur form.
fn schur_block_angles(t: &DMatrix<f64>) -> Vec<f64> {
    let p = t.nrows();
    let mut angles = Vec::with_capacity(p);
    let mut i = 0;
    while i < p {
        if i + 1 < p && t[(i + 1, i)] != 0.0 {
            let (a, b, c, d) = (t[(i, i)], t[(i, i + 1)], t[(i + 1, i)], t[(i + 1, i + 1)]);
            let half_tr = 0.5 * (a + d);
            let disc = 0.25 * (a - d) * (a - d) + b * c;
            if disc < 0.0 {
                let theta = (-disc).sqrt().atan2(half_tr);
                angles.push(theta);
                angles.push(-theta);
            } else {
                angles.push(real_angle(half_tr + disc.sqrt()));
                angles.push(real_angle(half_tr - disc.sqrt()));
            }
            i += 2;
        } else {
            angles.push(real_angle(t[(i, i)]));
            i += 1;
        }
    }
    angles
}

/// Schur-free fallback for orthogonal `H`: eigenvectors of the symmetric
/// part give the invariant planes and their cosines, and singular values of
/// the skew part restricted to each cluster recover the sines accurately
/// even for tiny angles.
fn split_angles(h: &DMatrix<f64>) -> Vec<f64> {
    let p = h.nrows();
    let sym = symmetrize(h);
    let skew = (h - h.transpose()) * 0.5;
    let (cosines, vectors) = sym_eigen_desc(&sym);
    let mut angles = Vec::with_capacity(p);
    let mut start = 0;
    while start < p {
        let mut end = start + 1;
        while end < p && cosines[end - 1] - cosines[end] <= COS_CLUSTER_TOL {
            end += 1;
        }
        let m = end - start;
        let c = cosines.rows(start, m).mean();
        let basis = vectors.columns(start, m).into_owned();
        let block = basis.transpose() * &skew * &basis;
        let s = svd_sorted(&block, false).singular_values;
        for pair in 0..m / 2 {
            let sine = (0.5 * (s[2 * pair] + s[2 * pair + 1])).min(1.0);
            let cosine = if c.abs() > 0.5 {
                c.signum() * (1.0 - sine * sine).max(0.0).sqrt()
            } else {
                c
            };
            let theta = sine.atan2(cosine);
            angles.push(theta);
            angles.push(-theta);
        }
        if m % 2 == 1 {
            angles.push(real_angle(c));
        }
        start = end;
    }
    angles
}

/// Eigen-angles of an orthogonal matrix from its real Schur form, sorted by
/// `|θ|` descending (positive member of each pair first).
pub fn eigen_angles(h: &DMatrix<f64>) -> Result<Vec<f64>> {
    if !h.is_square() {
        return Err(HolonomyError::InvalidDimension(format!(
            "holonomy must be square, got {}×{}",
            h.nrows(),
            h.ncols()
        )));
    }
    let defect = orthogonality_defect(h);
    if defect > ORTHO_TOL {
        return Err(HolonomyError::NotOrthogonal(defect));
    }
    let p = h.nrows();
    let mut angles = match h.clone().try_schur(SCHUR_EPS, SCHUR_MAX_ITER * p.max(1)) {
        Some(schur) => schur_block_angles(&schur.unpack().1),
        None => split_angles(h),
    };
    angles.sort_by(|x, y| y.abs().total_cmp(&x.abs()).then(y.total_cmp(x)));
    Ok(angles)
}

/// Per-neighborhood re-whitening of a centered cloud by its own weighted
/// covariance.
fn rewhiten_locally(cloud: &DMatrix<f64>, weights: &DVector<f64>, floor: f64) -> Result<DMatrix<f64>> {
    let mut weighted = cloud.clone();
    for (j, mut row) in weighted.row_iter_mut().enumerate() {
        row *= weights[j];
    }
    let cov = symmetrize(&(cloud.transpose() * weighted));
    Ok(cloud * inverse_sqrt_psd(&cov, floor)?)
}

/// The gauge-invariant holonomy estimator over a fixed pool.
pub struct HolonomyEstimator<'m> {
    pub config: EstimatorConfig,
    pub whitening: WhiteningTransform,
    whitened_pool: DMatrix<f64>,
    pool_inputs: Option<DMatrix<f64>>,
    map: Option<&'m dyn Featurizer>,
    config_hash: String,
    parallel: bool,
}

impl<'m> HolonomyEstimator<'m> {
    /// Fit the whitening gauge on `pool` (raw features).
    pub fn new(pool: &FeaturePool, map: Option<&'m dyn Featurizer>, config: EstimatorConfig) -> Result<Self> {
        if config.k == 0 || config.q == 0 {
            return Err(HolonomyError::InvalidArgument("k and q must be positive".into()));
        }
        if config.k > pool.n_pool() {
            return Err(HolonomyError::KTooLarge {
                k: config.k,
                n: pool.n_pool(),
            });
        }
        if let Some(m) = map {
            if m.output_dim() != pool.dim() {
                return Err(HolonomyError::DimensionMismatch {
                    context: "feature map output vs pool",
                    expected: pool.dim(),
                    found: m.output_dim(),
                });
            }
            if let Some(inputs) = pool.inputs() {
                if inputs.ncols() != m.input_dim() {
                    return Err(HolonomyError::DimensionMismatch {
                        context: "feature map input vs pool inputs",
                        expected: inputs.ncols(),
                        found: m.input_dim(),
                    });
                }
            }
        }
        let whitening = fit_whitening(pool, config.whitening, config.eigen_floor)?;
        let whitened_pool = whitening.apply_rows(pool.data())?;
        let config_hash = config.hash();
        Ok(Self {
            config,
            whitening,
            whitened_pool,
            pool_inputs: pool.inputs().cloned(),
            map,
            config_hash,
            parallel: true,
        })
    }

    /// Run edges sequentially (e.g. for feature maps that are not thread-safe
    /// in practice).
    pub fn sequential(mut self) -> Self {
        self.parallel = false;
        self
    }

    pub fn whitened_pool(&self) -> &DMatrix<f64> {
        &self.whitened_pool
    }

    pub fn config_hash(&self) -> &str {
        &self.config_hash
    }

    fn map(&self) -> Result<&'m dyn Featurizer> {
        self.map.ok_or(HolonomyError::MissingPoolInputs)
    }

    /// Whitened features of the moved pool rows `motion(u_j)`.
    fn moved_cloud(&self, indices: &[usize], motion: &Motion) -> Result<DMatrix<f64>> {
        let inputs = self.pool_inputs.as_ref().ok_or(HolonomyError::MissingPoolInputs)?;
        let map = self.map()?;
        let rows = select_rows(inputs, indices);
        let mut moved = rows.clone();
        for (j, mut row) in moved.row_iter_mut().enumerate() {
            let m = motion.apply(&rows.row(j).transpose());
            row.copy_from(&m.transpose());
        }
        self.whitening.apply_rows(&map.eval_rows(&moved)?)
    }

    fn edge(
        &self,
        a: &DVector<f64>,
        b: &DVector<f64>,
        motions: Option<(&Motion, &Motion)>,
    ) -> Result<(EdgeTransport, EdgeContext)> {
        let cfg = &self.config;
        let pool = &self.whitened_pool;
        let (mut source, mut target) = match cfg.neighbor_mode {
            NeighborMode::Shared => {
                let ctx = shared_edge_context(pool, a, b, cfg.k)?;
                match cfg.centering {
                    CloudMode::MidpointShared => (ctx.clone(), ctx),
                    CloudMode::EndpointPair => (ctx.recentered_at(pool, a), ctx.recentered_at(pool, b)),
                    CloudMode::RowTransport => {
                        let (ma, mb) = motions.ok_or(HolonomyError::MissingPoolInputs)?;
                        let xs = self.moved_cloud(&ctx.indices, ma)?;
                        let ys = self.moved_cloud(&ctx.indices, mb)?;
                        (ctx.with_rows(&xs), ctx.with_rows(&ys))
                    }
                }
            }
            NeighborMode::Separate => {
                let (ca, cb) = separate_edge_contexts(pool, a, b, cfg.k)?;
                match cfg.centering {
                    CloudMode::MidpointShared | CloudMode::EndpointPair => (ca, cb),
                    CloudMode::RowTransport => {
                        let (ma, mb) = motions.ok_or(HolonomyError::MissingPoolInputs)?;
                        let xs = self.moved_cloud(&ca.indices, ma)?;
                        let ys = self.moved_cloud(&cb.indices, mb)?;
                        (ca.with_rows(&xs), cb.with_rows(&ys))
                    }
                }
            }
        };
        if cfg.whitening == WhiteningMode::Local {
            source.centered_cloud = rewhiten_locally(&source.centered_cloud, &source.weights, cfg.eigen_floor)?;
            target.centered_cloud = rewhiten_locally(&target.centered_cloud, &target.weights, cfg.eigen_floor)?;
        }
        let transport = edge_transport(&source, &target, cfg.q, cfg.group)?;
        Ok((transport, source))
    }

    fn run(&self, whitened: &[DVector<f64>], motions: Option<&[Motion]>, loop_id: &str) -> Result<HolonomyResult> {
        if whitened.len() < 2 {
            return Err(HolonomyError::InvalidArgument("a loop needs at least one edge".into()));
        }
        let l = whitened.len() - 1;
        let one = |i: usize| {
            let m = motions.map(|m| (&m[i], &m[i + 1]));
            self.edge(&whitened[i], &whitened[i + 1], m)
        };
        let edges: Vec<(EdgeTransport, EdgeContext)> = if self.parallel {
            (0..l).into_par_iter().map(one).collect::<Result<_>>()?
        } else {
            (0..l).map(one).collect::<Result<_>>()?
        };
        let rotations: Vec<DMatrix<f64>> = edges.iter().map(|(t, _)| t.rotation.clone()).collect();
        let (h, drift_correction) = compose(&rotations)?;
        let diagnostics = (0..l)
            .map(|i| {
                let (t, ctx) = &edges[i];
                EdgeDiagnostics {
                    indices: ctx.indices.clone(),
                    sigma: ctx.sigma,
                    var_captured: t.var_captured,
                    q_effective: t.q_effective,
                    det_flipped: t.det_flipped,
                    degenerate: t.degenerate,
                    iou_next: index_iou(&ctx.indices, &edges[(i + 1) % l].1.indices),
                }
            })
            .collect();
        let eigen_angles = eigen_angles(&h)?;
        Ok(HolonomyResult {
            h_norm: h_norm(&h),
            h,
            eigen_angles,
            edges: diagnostics,
            loop_id: loop_id.to_string(),
            config_hash: self.config_hash.clone(),
            drift_correction,
            bias_floor: None,
        })
    }

    /// Holonomy of an input-space loop under the attached feature map.
    pub fn estimate(&self, lp: &InputLoop, loop_id: &str) -> Result<HolonomyResult> {
        lp.validate()?;
        let map = self.map()?;
        let feats: Vec<DVector<f64>> = lp
            .points
            .iter()
            .map(|x| map.eval(x).and_then(|z| self.whitening.apply(&z)))
            .collect::<Result<_>>()?;
        self.run(&feats, Some(&lp.motions), loop_id)
    }

    /// Holonomy from precomputed raw loop features (`(L+1) × p`, closed).
    /// Only the cloud modes that need no pool inputs are available here.
    pub fn estimate_features(&self, features: &DMatrix<f64>, loop_id: &str) -> Result<HolonomyResult> {
        if self.config.centering == CloudMode::RowTransport {
            return Err(HolonomyError::MissingPoolInputs);
        }
        let n = features.nrows();
        if n < 2 {
            return Err(HolonomyError::InvalidArgument("a loop needs at least one edge".into()));
        }
        if features.row(0) != features.row(n - 1) {
            return Err(HolonomyError::LoopNotClosed);
        }
        let feats: Vec<DVector<f64>> = (0..n)
            .map(|i| self.whitening.apply(&features.row(i).transpose()))
            .collect::<Result<_>>()?;
        self.run(&feats, None, loop_id)
    }

    /// h_norm of the zero-radius loop at the loop's start point.
    pub fn bias_floor(&self, lp: &InputLoop) -> Result<f64> {
        let mut base = self_loop(&lp.points[0], lp.n_edges());
        base.motions = vec![lp.motions[0].clone(); lp.points.len()];
        Ok(self.estimate(&base, "self_loop")?.h_norm)
    }

    /// [`Self::estimate`] plus the matching self-loop floor.
    pub fn estimate_with_floor(&self, lp: &InputLoop, loop_id: &str) -> Result<HolonomyResult> {
        let mut res = self.estimate(lp, loop_id)?;
        res.bias_floor = Some(self.bias_floor(lp)?);
        Ok(res)
    }

    /// `‖H(γ⁻¹) H(γ) − I‖_F / (2√p)`.
    pub fn orientation_gap(&self, lp: &InputLoop) -> Result<f64> {
        let fwd = self.estimate(lp, "forward")?;
        let back = self.estimate(&lp.reversed(), "reversed")?;
        Ok(h_norm(&(back.h * fwd.h)))
    }
}

/// One-shot estimate: fit the gauge on `pool` and estimate `lp` under `map`.
pub fn estimate_loop(
    pool: &FeaturePool,
    map: &dyn Featurizer,
    lp: &InputLoop,
    config: &EstimatorConfig,
) -> Result<HolonomyResult> {
    HolonomyEstimator::new(pool, Some(map), config.clone())?.estimate(lp, "loop")
}

pub fn orientation_gap(
    pool: &FeaturePool,
    map: &dyn Featurizer,
    lp: &InputLoop,
    config: &EstimatorConfig,
) -> Result<f64> {
    HolonomyEstimator::new(pool, Some(map), config.clone())?.orientation_gap(lp)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{block_rotation, max_abs_diff, random_rotation};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn compose_identities_and_single() {
        let id = DMatrix::<f64>::identity(4, 4);
        let (h, c) = compose(&[id.clone(), id.clone()]).unwrap();
        assert_eq!(h, id);
        assert_eq!(c, 0.0);
        let r = random_rotation(&mut ChaCha8Rng::seed_from_u64(1), 4);
        assert!(max_abs_diff(&compose(std::slice::from_ref(&r)).unwrap().0, &r) < 1e-15);
        assert!(compose(&[]).is_err());
        assert!(compose(&[id, DMatrix::identity(3, 3)]).is_err());
    }

    #[test]
    fn compose_order_is_last_edge_leftmost() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = random_rotation(&mut rng, 3);
        let b = random_rotation(&mut rng, 3);
        let (h, _) = compose(&[a.clone(), b.clone()]).unwrap();
        assert!(max_abs_diff(&h, &(&b * &a)) < 1e-14);
    }

    #[test]
    fn planar_rotations_add() {
        let (h, _) = compose(&[block_rotation(2, &[0.4]), block_rotation(2, &[-1.1])]).unwrap();
        assert!(max_abs_diff(&h, &block_rotation(2, &[-0.7])) < 1e-12);
    }

    #[test]
    fn drift_is_corrected_and_recorded() {
        let mut r = block_rotation(3, &[0.2]);
        r[(2, 2)] += 1e-7;
        let (h, c) = compose(&[r]).unwrap();
        assert!(c > 0.0);
        assert!(orthogonality_defect(&h) < 1e-12);
    }

    #[test]
    fn h_norm_closed_forms() {
        assert_eq!(h_norm(&DMatrix::identity(5, 5)), 0.0);
        assert!((h_norm(&-DMatrix::<f64>::identity(2, 2)) - 1.0).abs() < 1e-15);
        let quarter = block_rotation(2, &[std::f64::consts::FRAC_PI_2]);
        assert!((h_norm(&quarter) - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-12);
    }

    #[test]
    fn eigen_angles_of_block_rotation() {
        let h = block_rotation(6, &[0.3, -0.7]);
        let got = eigen_angles(&h).unwrap();
        let want = [0.7, -0.7, 0.3, -0.3, 0.0, 0.0];
        for (g, w) in got.iter().zip(want) {
            assert!((g - w).abs() < 1e-10, "{got:?}");
        }
        assert!((h_norm_from_angles(&got) - h_norm(&h)).abs() < 1e-8);
        assert!(eigen_angles(&DMatrix::identity(4, 4))
            .unwrap()
            .iter()
            .all(|t| *t == 0.0));
    }

    #[test]
    fn eigen_angles_of_reflections_and_random_rotations() {
        let mut h = DMatrix::<f64>::identity(3, 3);
        h[(1, 1)] = -1.0;
        h[(2, 2)] = -1.0;
        let a = eigen_angles(&h).unwrap();
        assert!((a[0] - std::f64::consts::PI).abs() < 1e-12);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for p in [2, 5, 16, 33] {
            let r = random_rotation(&mut rng, p);
            let ang = eigen_angles(&r).unwrap();
            assert_eq!(ang.len(), p);
            let lhs = (&r - DMatrix::<f64>::identity(p, p)).norm_squared();
            let rhs: f64 = 2.0 * ang.iter().map(|t| 1.0 - t.cos()).sum::<f64>();
            assert!((lhs - rhs).abs() <= 1e-6 * lhs.max(1e-12));
            assert!(ang
                .iter()
                .all(|t| *t > -std::f64::consts::PI && *t <= std::f64::consts::PI));
        }
    }

    #[test]
    fn split_angles_matches_known_spectrum() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let q = random_rotation(&mut rng, 7);
        let h = &q * block_rotation(7, &[2.5, 1e-7, 3e-7]) * q.transpose();
        let mut got = split_angles(&h);
        got.sort_by(|x, y| y.abs().total_cmp(&x.abs()).then(y.total_cmp(x)));
        let want = [2.5, -2.5, 3e-7, -3e-7, 1e-7, -1e-7, 0.0];
        for (g, w) in got.iter().zip(want) {
            assert!((g - w).abs() < 1e-12, "{got:?}");
        }
    }

    #[test]
    fn near_identity_spectrum_terminates() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for p in [8, 32, 64] {
            let q = random_rotation(&mut rng, p);
            let angles: Vec<f64> = (0..p / 2).map(|i| 1e-9 * (i + 1) as f64).collect();
            let h = &q * block_rotation(p, &angles) * q.transpose();
            let got = eigen_angles(&h).unwrap();
            assert!((got[0] - 1e-9 * (p / 2) as f64).abs() < 1e-12);
            assert!((h_norm_from_angles(&got) - h_norm(&h)).abs() < 1e-12);
        }
    }

    #[test]
    fn eigen_angles_rejects_non_orthogonal() {
        let m = DMatrix::from_element(3, 3, 0.5);
        assert!(matches!(eigen_angles(&m), Err(HolonomyError::NotOrthogonal(_))));
    }

    #[test]
    fn reversed_edge_list_inverts_holonomy() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let edges: Vec<_> = (0..6).map(|_| random_rotation(&mut rng, 5)).collect();
        let back: Vec<_> = edges.iter().rev().map(|r| r.transpose()).collect();
        let (h, _) = compose(&edges).unwrap();
        let (hb, _) = compose(&back).unwrap();
        assert!(h_norm(&(hb * h)) < 1e-14);
    }
}
