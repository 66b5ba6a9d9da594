//! Gauge fixing: pool statistics, whitening transforms and the orthonormal
//! random-projection readout.

use nalgebra::{DMatrix, DVector};

use crate::config::WhiteningMode;
use crate::error::{HolonomyError, Result};
use crate::linalg::{orthonormal_columns, sym_eigen_desc, symmetrize};

/// Raw features of the gauge-fixing population, one row per example.
///
/// `inputs`, when present, holds the input row that produced each feature
/// row; the row-transport estimator needs it to re-evaluate neighbors.
#[derive(Debug, Clone)]
pub struct FeaturePool {
    data: DMatrix<f64>,
    mean: DVector<f64>,
    covariance: DMatrix<f64>,
    inputs: Option<DMatrix<f64>>,
}

impl FeaturePool {
    pub fn new(data: DMatrix<f64>) -> Result<Self> {
        let (n, p) = data.shape();
        if n < 2 {
            return Err(HolonomyError::InvalidDimension(format!(
                "pool needs at least 2 rows, got {n}"
            )));
        }
        if p == 0 {
            return Err(HolonomyError::InvalidDimension("pool has zero columns".into()));
        }
        for (idx, v) in data.iter().enumerate() {
            if !v.is_finite() {
                // column-major storage
                return Err(HolonomyError::NonFiniteEntry {
                    row: idx % n,
                    col: idx / n,
                });
            }
        }
        let mean = DVector::from_fn(p, |j, _| data.column(j).sum() / n as f64);
        let mut centered = data.clone();
        for j in 0..p {
            let m = mean[j];
            centered.column_mut(j).add_scalar_mut(-m);
        }
        let covariance = symmetrize(&((centered.transpose() * &centered) / n as f64));
        Ok(Self {
            data,
            mean,
            covariance,
            inputs: None,
        })
    }

    /// Attach the inputs that generated each pool row.
    pub fn with_inputs(mut self, inputs: DMatrix<f64>) -> Result<Self> {
        if inputs.nrows() != self.data.nrows() {
            return Err(HolonomyError::DimensionMismatch {
                context: "pool inputs",
                expected: self.data.nrows(),
                found: inputs.nrows(),
            });
        }
        self.inputs = Some(inputs);
        Ok(self)
    }

    pub fn data(&self) -> &DMatrix<f64> {
        &self.data
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn covariance(&self) -> &DMatrix<f64> {
        &self.covariance
    }

    pub fn inputs(&self) -> Option<&DMatrix<f64>> {
        self.inputs.as_ref()
    }

    pub fn n_pool(&self) -> usize {
        self.data.nrows()
    }

    pub fn dim(&self) -> usize {
        self.data.ncols()
    }
}

/// A fixed gauge `z ↦ inv_sqrt · (z − mean)`.
#[derive(Debug, Clone, PartialEq)]
pub struct WhiteningTransform {
    pub mode: WhiteningMode,
    pub mean: DVector<f64>,
    pub inv_sqrt: DMatrix<f64>,
    pub eigen_floor: f64,
}

/// Symmetric inverse square root of a PSD matrix with eigenvalues clamped
/// from below at `floor · λ_max`.
pub fn inverse_sqrt_psd(cov: &DMatrix<f64>, floor: f64) -> Result<DMatrix<f64>> {
    let (values, vectors) = sym_eigen_desc(cov);
    let lambda_max = values.iter().copied().fold(0.0f64, f64::max);
    if lambda_max <= 0.0 || !lambda_max.is_finite() {
        return Err(HolonomyError::ZeroVariance);
    }
    let clamp = floor * lambda_max;
    let scales = values.map(|l| 1.0 / l.max(clamp).sqrt());
    let scaled = DMatrix::from_fn(vectors.nrows(), vectors.ncols(), |r, c| vectors[(r, c)] * scales[c]);
    Ok(symmetrize(&(scaled * vectors.transpose())))
}

pub fn fit_whitening(pool: &FeaturePool, mode: WhiteningMode, eigen_floor: f64) -> Result<WhiteningTransform> {
    if !(eigen_floor > 0.0 && eigen_floor < 1.0) {
        return Err(HolonomyError::InvalidArgument(format!(
            "eigen_floor {eigen_floor} not in (0, 1)"
        )));
    }
    let p = pool.dim();
    if pool.covariance.shape() != (p, p) || pool.mean.len() != p {
        return Err(HolonomyError::DimensionMismatch {
            context: "pool statistics",
            expected: p,
            found: pool.mean.len(),
        });
    }
    let inv_sqrt = match mode {
        WhiteningMode::Zca | WhiteningMode::Local => inverse_sqrt_psd(&pool.covariance, eigen_floor)?,
        WhiteningMode::Zscore => {
            let var = pool.covariance.diagonal();
            let var_max = var.iter().copied().fold(0.0f64, f64::max);
            if var_max <= 0.0 {
                return Err(HolonomyError::ZeroVariance);
            }
            let clamp = eigen_floor * var_max;
            DMatrix::from_diagonal(&var.map(|v| 1.0 / v.max(clamp).sqrt()))
        }
    };
    Ok(WhiteningTransform {
        mode,
        mean: pool.mean.clone(),
        inv_sqrt,
        eigen_floor,
    })
}

impl WhiteningTransform {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn apply(&self, z: &DVector<f64>) -> Result<DVector<f64>> {
        if z.len() != self.dim() {
            return Err(HolonomyError::DimensionMismatch {
                context: "whitening input",
                expected: self.dim(),
                found: z.len(),
            });
        }
        Ok(&self.inv_sqrt * (z - &self.mean))
    }

    /// Row-wise application to an `M×p` matrix.
    pub fn apply_rows(&self, rows: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if rows.ncols() != self.dim() {
            return Err(HolonomyError::DimensionMismatch {
                context: "whitening input",
                expected: self.dim(),
                found: rows.ncols(),
            });
        }
        let mut centered = rows.clone();
        for j in 0..self.dim() {
            let m = self.mean[j];
            centered.column_mut(j).add_scalar_mut(-m);
        }
        // inv_sqrt is symmetric, so (inv_sqrt · cᵀ)ᵀ = c · inv_sqrt.
        Ok(centered * &self.inv_sqrt)
    }
}

/// Fixed orthonormal projection `z ↦ basisᵀ z` to a lower dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct ReadoutProjection {
    pub basis: DMatrix<f64>,
    pub target_dim: usize,
    pub seed: u64,
}

/// Portable Gaussian stream for the readout basis: SplitMix64 words turned
/// into standard normals by Box–Muller, two per pair of words. Kept
/// self-contained so other implementations can regenerate the same basis.
pub struct SplitMixGaussian {
    state: u64,
    spare: Option<f64>,
}

impl SplitMixGaussian {
    pub fn new(seed: u64) -> Self {
        Self {
            state: seed,
            spare: None,
        }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }

    /// Uniform in the open interval (0, 1).
    pub fn next_open01(&mut self) -> f64 {
        ((self.next_u64() >> 11) as f64 + 0.5) * (1.0 / (1u64 << 53) as f64)
    }

    pub fn next_gaussian(&mut self) -> f64 {
        if let Some(v) = self.spare.take() {
            return v;
        }
        let u1 = self.next_open01();
        let u2 = self.next_open01();
        let radius = (-2.0 * u1.ln()).sqrt();
        let (s, c) = (2.0 * std::f64::consts::PI * u2).sin_cos();
        self.spare = Some(radius * s);
        radius * c
    }
}

pub fn make_readout(p_raw: usize, p_star: usize, seed: u64) -> Result<ReadoutProjection> {
    if p_star == 0 || p_star > p_raw {
        return Err(HolonomyError::InvalidDimension(format!(
            "readout target {p_star} must be in 1..={p_raw}"
        )));
    }
    let mut stream = SplitMixGaussian::new(seed);
    // Row-major fill order.
    let mut gauss = DMatrix::zeros(p_raw, p_star);
    for i in 0..p_raw {
        for j in 0..p_star {
            gauss[(i, j)] = stream.next_gaussian();
        }
    }
    Ok(ReadoutProjection {
        basis: orthonormal_columns(&gauss),
        target_dim: p_star,
        seed,
    })
}

impl ReadoutProjection {
    pub fn apply(&self, z: &DVector<f64>) -> Result<DVector<f64>> {
        if z.len() != self.basis.nrows() {
            return Err(HolonomyError::DimensionMismatch {
                context: "readout input",
                expected: self.basis.nrows(),
                found: z.len(),
            });
        }
        Ok(self.basis.transpose() * z)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{gaussian_matrix, max_abs_diff, orthogonality_defect};
    use nalgebra::dmatrix;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn pool_with_covariance(target: &DMatrix<f64>, n: usize, seed: u64) -> FeaturePool {
        // Exact covariance: whiten a Gaussian sample, then color it.
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = target.nrows();
        let raw = FeaturePool::new(gaussian_matrix(&mut rng, n, p)).unwrap();
        let w = fit_whitening(&raw, WhiteningMode::Zca, 1e-12).unwrap();
        let white = w.apply_rows(raw.data()).unwrap();
        let color = target.clone().cholesky().unwrap().l();
        FeaturePool::new(white * color.transpose()).unwrap()
    }

    #[test]
    fn identity_covariance_gives_identity() {
        let pool = pool_with_covariance(&DMatrix::identity(3, 3), 500, 1);
        let w = fit_whitening(&pool, WhiteningMode::Zca, 1e-10).unwrap();
        assert!(max_abs_diff(&w.inv_sqrt, &DMatrix::identity(3, 3)) < 1e-10);
    }

    #[test]
    fn diagonal_covariance_closed_form() {
        let pool = pool_with_covariance(&dmatrix![4.0, 0.0; 0.0, 1.0], 400, 2);
        let w = fit_whitening(&pool, WhiteningMode::Zca, 1e-10).unwrap();
        assert!(max_abs_diff(&w.inv_sqrt, &dmatrix![0.5, 0.0; 0.0, 1.0]) < 1e-10);
    }

    #[test]
    fn apply_centers_and_scales() {
        let t = WhiteningTransform {
            mode: WhiteningMode::Zscore,
            mean: DVector::zeros(2),
            inv_sqrt: dmatrix![0.5, 0.0; 0.0, 1.0],
            eigen_floor: 1e-10,
        };
        let out = t.apply(&DVector::from_vec(vec![2.0, 3.0])).unwrap();
        assert_eq!(out.as_slice(), &[1.0, 3.0]);
        let t2 = WhiteningTransform {
            mean: DVector::from_vec(vec![1.5, -2.0]),
            ..t
        };
        assert_eq!(t2.apply(&t2.mean.clone()).unwrap().norm(), 0.0);
        assert!(matches!(
            t2.apply(&DVector::zeros(3)),
            Err(HolonomyError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn zca_satisfies_whitening_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = gaussian_matrix(&mut rng, 6, 6);
        let pool = FeaturePool::new(gaussian_matrix(&mut rng, 300, 6) * a).unwrap();
        let w = fit_whitening(&pool, WhiteningMode::Zca, 1e-10).unwrap();
        assert!(max_abs_diff(&w.inv_sqrt, &w.inv_sqrt.transpose()) == 0.0);
        let check = &w.inv_sqrt * pool.covariance() * &w.inv_sqrt;
        assert!(max_abs_diff(&check, &DMatrix::identity(6, 6)) < 1e-8);
        // refit on the whitened pool: mean ≈ 0 and gauge ≈ identity
        let white = FeaturePool::new(w.apply_rows(pool.data()).unwrap()).unwrap();
        assert!(white.mean().amax() < 1e-12 * 6.0);
        let w2 = fit_whitening(&white, WhiteningMode::Zca, 1e-10).unwrap();
        assert!(max_abs_diff(&w2.inv_sqrt, &DMatrix::identity(6, 6)) < 1e-6);
    }

    #[test]
    fn zscore_is_positive_diagonal() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let pool = FeaturePool::new(gaussian_matrix(&mut rng, 100, 4) * 3.0).unwrap();
        let w = fit_whitening(&pool, WhiteningMode::Zscore, 1e-10).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                if i == j {
                    assert!(w.inv_sqrt[(i, j)] > 0.0);
                } else {
                    assert_eq!(w.inv_sqrt[(i, j)], 0.0);
                }
            }
        }
    }

    #[test]
    fn zero_variance_and_bad_floor_rejected() {
        let pool = FeaturePool::new(DMatrix::from_element(4, 3, 2.5)).unwrap();
        assert!(matches!(
            fit_whitening(&pool, WhiteningMode::Zca, 1e-10),
            Err(HolonomyError::ZeroVariance)
        ));
        assert!(fit_whitening(&pool, WhiteningMode::Zca, 0.0).is_err());
        assert!(FeaturePool::new(DMatrix::zeros(1, 3)).is_err());
    }

    #[test]
    fn pool_rejects_non_finite() {
        let mut m = DMatrix::zeros(3, 2);
        m[(2, 1)] = f64::NAN;
        assert!(matches!(
            FeaturePool::new(m),
            Err(HolonomyError::NonFiniteEntry { row: 2, col: 1 })
        ));
    }

    #[test]
    fn readout_square_is_orthogonal_and_deterministic() {
        let a = make_readout(8, 8, 42).unwrap();
        assert!(orthogonality_defect(&a.basis) < 1e-12);
        let b = make_readout(8, 8, 42).unwrap();
        assert_eq!(a.basis, b.basis);
        assert_ne!(make_readout(8, 8, 43).unwrap().basis, a.basis);
        assert!(matches!(make_readout(4, 5, 0), Err(HolonomyError::InvalidDimension(_))));
    }

    #[test]
    fn readout_columns_orthonormal() {
        let r = make_readout(300, 40, 7).unwrap();
        assert!(orthogonality_defect(&r.basis) < 1e-10);
        // Positive R diagonal: each column leans on its Gaussian source column.
        let mut stream = SplitMixGaussian::new(7);
        let mut gauss = DMatrix::zeros(300, 40);
        for i in 0..300 {
            for j in 0..40 {
                gauss[(i, j)] = stream.next_gaussian();
            }
        }
        for j in 0..40 {
            assert!(r.basis.column(j).dot(&gauss.column(j)) > 0.0);
        }
    }

    #[test]
    fn splitmix_reference_words() {
        // Reference values of SplitMix64 seeded with 0.
        let mut s = SplitMixGaussian::new(0);
        assert_eq!(s.next_u64(), 0xE220_A839_7B1D_CDAF);
        assert_eq!(s.next_u64(), 0x6E78_9E6A_A1B9_65F4);
    }
}
