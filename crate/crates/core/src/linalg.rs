//! Small dense linear-algebra helpers on top of nalgebra.
//!
//! nalgebra does not promise any ordering of singular values or symmetric
//! eigenvalues, so everything here returns them sorted in descending order.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

/// Thin SVD `A = U diag(s) Vᵀ` with singular values sorted descending.
pub struct SortedSvd {
    pub u: DMatrix<f64>,
    pub singular_values: DVector<f64>,
    pub v_t: DMatrix<f64>,
}

pub fn svd_sorted(a: &DMatrix<f64>, compute_u: bool) -> SortedSvd {
    let svd = a.clone().svd(compute_u, true);
    let s = svd.singular_values;
    let n = s.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| s[j].total_cmp(&s[i]).then(i.cmp(&j)));
    let singular_values = DVector::from_iterator(n, order.iter().map(|&i| s[i]));
    let v_t_raw = svd.v_t.expect("v_t requested");
    let v_t = DMatrix::from_fn(n, v_t_raw.ncols(), |r, c| v_t_raw[(order[r], c)]);
    let u = match svd.u {
        Some(u_raw) => DMatrix::from_fn(u_raw.nrows(), n, |r, c| u_raw[(r, order[c])]),
        None => DMatrix::zeros(0, 0),
    };
    SortedSvd {
        u,
        singular_values,
        v_t,
    }
}

/// Symmetric eigendecomposition with eigenvalues sorted descending; column
/// `i` of the returned matrix is the eigenvector of `values[i]`.
pub fn sym_eigen_desc(a: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let sym = symmetrize(a);
    let eig = sym.symmetric_eigen();
    let n = eig.eigenvalues.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[j].total_cmp(&eig.eigenvalues[i]).then(i.cmp(&j)));
    let values = DVector::from_iterator(n, order.iter().map(|&i| eig.eigenvalues[i]));
    let vectors = DMatrix::from_fn(n, n, |r, c| eig.eigenvectors[(r, order[c])]);
    (values, vectors)
}

pub fn symmetrize(a: &DMatrix<f64>) -> DMatrix<f64> {
    (a + a.transpose()) * 0.5
}

/// `max |AᵀA − I|`.
pub fn orthogonality_defect(a: &DMatrix<f64>) -> f64 {
    let gram = a.transpose() * a;
    let n = gram.nrows();
    let mut worst = 0.0f64;
    for i in 0..n {
        for j in 0..n {
            let target = if i == j { 1.0 } else { 0.0 };
            worst = worst.max((gram[(i, j)] - target).abs());
        }
    }
    worst
}

pub fn max_abs_diff(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    a.iter()
        .zip(b.iter())
        .fold(0.0f64, |acc, (x, y)| acc.max((x - y).abs()))
}

/// Orthogonal polar factor `U Vᵀ` of a square matrix.
pub fn polar_orthogonal(a: &DMatrix<f64>) -> DMatrix<f64> {
    let svd = svd_sorted(a, true);
    &svd.u * &svd.v_t
}

pub fn gaussian_matrix<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| rng.sample::<f64, _>(StandardNormal))
}

pub fn gaussian_vector<R: Rng + ?Sized>(rng: &mut R, n: usize) -> DVector<f64> {
    DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal))
}

/// Orthonormalize the columns of `a` with Householder QR and flip each
/// column so that the corresponding diagonal entry of R is non-negative.
pub fn orthonormal_columns(a: &DMatrix<f64>) -> DMatrix<f64> {
    let qr = a.clone().qr();
    let mut q = qr.q();
    let r = qr.r();
    for j in 0..q.ncols() {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    q
}

/// Haar-ish random orthogonal matrix (QR of a Gaussian matrix).
pub fn random_orthogonal<R: Rng + ?Sized>(rng: &mut R, p: usize) -> DMatrix<f64> {
    orthonormal_columns(&gaussian_matrix(rng, p, p))
}

/// Random element of SO(p).
pub fn random_rotation<R: Rng + ?Sized>(rng: &mut R, p: usize) -> DMatrix<f64> {
    let mut q = random_orthogonal(rng, p);
    if q.determinant() < 0.0 {
        q.column_mut(0).neg_mut();
    }
    q
}

/// Block-diagonal rotation with the given 2×2 block angles; remaining
/// coordinates are left fixed.
pub fn block_rotation(p: usize, angles: &[f64]) -> DMatrix<f64> {
    assert!(2 * angles.len() <= p, "too many blocks for dimension");
    let mut m = DMatrix::identity(p, p);
    for (b, &theta) in angles.iter().enumerate() {
        let (s, c) = theta.sin_cos();
        let i = 2 * b;
        m[(i, i)] = c;
        m[(i, i + 1)] = -s;
        m[(i + 1, i)] = s;
        m[(i + 1, i + 1)] = c;
    }
    m
}

/// Weighted column means `Σ_j w_j row_j` of `rows`.
pub fn weighted_row_mean(rows: &DMatrix<f64>, weights: &DVector<f64>) -> DVector<f64> {
    rows.transpose() * weights
}

/// Subtract `center` from every row.
pub fn center_rows(rows: &DMatrix<f64>, center: &DVector<f64>) -> DMatrix<f64> {
    let mut out = rows.clone();
    for mut row in out.row_iter_mut() {
        for (j, v) in row.iter_mut().enumerate() {
            *v -= center[j];
        }
    }
    out
}

/// Select rows of `m` in the given order.
pub fn select_rows(m: &DMatrix<f64>, indices: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(indices.len(), m.ncols(), |r, c| m[(indices[r], c)])
}

/// Median of a non-empty slice (mean of the two central values for even
/// lengths).
pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn sorted_svd_reconstructs() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = gaussian_matrix(&mut rng, 7, 4);
        let svd = svd_sorted(&a, true);
        for w in svd.singular_values.as_slice().windows(2) {
            assert!(w[0] >= w[1]);
        }
        let rebuilt = &svd.u * DMatrix::from_diagonal(&svd.singular_values) * &svd.v_t;
        assert!(max_abs_diff(&rebuilt, &a) < 1e-12);
    }

    #[test]
    fn random_rotation_is_special_orthogonal() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for p in [1, 2, 5, 16] {
            let q = random_rotation(&mut rng, p);
            assert!(orthogonality_defect(&q) < 1e-12);
            assert!((q.determinant() - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn median_even_and_odd() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
    }
}
