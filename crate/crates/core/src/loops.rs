//! Closed loops in input space and the motions that carry pool rows along
//! them.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{HolonomyError, Result};
use crate::linalg::{gaussian_matrix, orthonormal_columns, select_rows, svd_sorted};
use crate::neighbors::knn;

/// Input-space motion attached to one loop point. Applying it to the loop's
/// anchor yields the point; applying it to a pool row carries that row
/// along the loop.
#[derive(Debug, Clone, PartialEq)]
pub enum Motion {
    Translate(DVector<f64>),
    /// Circular shift of a row-major `height × width` image.
    Shift {
        dy: i64,
        dx: i64,
        height: usize,
        width: usize,
    },
}

impl Motion {
    pub fn apply(&self, input: &DVector<f64>) -> DVector<f64> {
        match self {
            Motion::Translate(offset) => input + offset,
            Motion::Shift { dy, dx, height, width } => shift_flat(input, *height, *width, *dy, *dx),
        }
    }

    pub fn is_identity(&self) -> bool {
        match self {
            Motion::Translate(offset) => offset.iter().all(|v| *v == 0.0),
            Motion::Shift { dy, dx, height, width } => {
                dy.rem_euclid(*height as i64) == 0 && dx.rem_euclid(*width as i64) == 0
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LoopKind {
    PcaCircle,
    RandomCircle,
    SelfLoop,
    Translation,
    Custom,
}

impl LoopKind {
    pub fn as_str(self) -> &'static str {
        match self {
            LoopKind::PcaCircle => "pca_circle",
            LoopKind::RandomCircle => "random_circle",
            LoopKind::SelfLoop => "self_loop",
            LoopKind::Translation => "translation",
            LoopKind::Custom => "custom",
        }
    }
}

/// Closed discrete loop `x_0, …, x_L = x_0` with one motion per point.
#[derive(Debug, Clone, PartialEq)]
pub struct InputLoop {
    pub kind: LoopKind,
    pub points: Vec<DVector<f64>>,
    pub motions: Vec<Motion>,
    pub radius: f64,
}

impl InputLoop {
    /// Loop through explicit points, with translations measured from the
    /// centroid of the distinct points.
    pub fn from_points(points: Vec<DVector<f64>>) -> Result<Self> {
        if points.len() < 2 {
            return Err(HolonomyError::InvalidArgument("a loop needs at least one edge".into()));
        }
        if points.first() != points.last() {
            return Err(HolonomyError::LoopNotClosed);
        }
        let l = points.len() - 1;
        let d = points[0].len();
        let mut centroid = DVector::zeros(d);
        for p in &points[..l] {
            centroid += p;
        }
        centroid /= l as f64;
        let mut motions: Vec<Motion> = points[..l].iter().map(|p| Motion::Translate(p - &centroid)).collect();
        motions.push(motions[0].clone());
        let radius = points[..l]
            .iter()
            .map(|p| (p - &centroid).norm())
            .fold(0.0f64, f64::max);
        Ok(Self {
            kind: LoopKind::Custom,
            points,
            motions,
            radius,
        })
    }

    pub fn n_edges(&self) -> usize {
        self.points.len() - 1
    }

    pub fn input_dim(&self) -> usize {
        self.points[0].len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.points.len() < 2 || self.motions.len() != self.points.len() {
            return Err(HolonomyError::InvalidArgument(
                "loop needs L ≥ 1 edges and one motion per point".into(),
            ));
        }
        if self.points.first() != self.points.last() || self.motions.first() != self.motions.last() {
            return Err(HolonomyError::LoopNotClosed);
        }
        Ok(())
    }

    /// Same points traversed backwards.
    pub fn reversed(&self) -> Self {
        let mut out = self.clone();
        out.points.reverse();
        out.motions.reverse();
        out
    }

    /// Same cycle started at point `start`.
    pub fn cycled(&self, start: usize) -> Self {
        let l = self.n_edges();
        let rotate = |v: &[DVector<f64>]| -> Vec<DVector<f64>> {
            let mut r: Vec<_> = (0..l).map(|i| v[(i + start) % l].clone()).collect();
            r.push(r[0].clone());
            r
        };
        let mut motions: Vec<Motion> = (0..l).map(|i| self.motions[(i + start) % l].clone()).collect();
        motions.push(motions[0].clone());
        Self {
            kind: self.kind,
            points: rotate(&self.points),
            motions,
            radius: self.radius,
        }
    }
}

/// Local plane from the top two principal directions of a neighbor set.
#[derive(Debug, Clone, PartialEq)]
pub struct PlaneFit {
    pub basis: DMatrix<f64>,
    pub variance_captured: f64,
    /// Rank was below 2 and the basis was completed with a seeded direction.
    pub degenerate: bool,
}

fn fix_sign(col: &mut DVector<f64>) {
    if let Some(first) = col.iter().find(|v| v.abs() > 1e-12) {
        if *first < 0.0 {
            col.neg_mut();
        }
    }
}

/// Top-2 principal directions of the mean-centered neighbor matrix, each
/// column signed so that its first nonzero entry is positive.
pub fn pca_plane(neighbor_inputs: &DMatrix<f64>, fallback_seed: u64) -> Result<PlaneFit> {
    let (m, d) = neighbor_inputs.shape();
    if m < 2 || d < 2 {
        return Err(HolonomyError::InvalidDimension(format!(
            "plane fit needs ≥ 2 neighbors in ≥ 2 dims, got {m}×{d}"
        )));
    }
    let mean = DVector::from_fn(d, |j, _| neighbor_inputs.column(j).mean());
    let centered = crate::linalg::center_rows(neighbor_inputs, &mean);
    let svd = svd_sorted(&centered, false);
    let s = &svd.singular_values;
    let total: f64 = s.iter().map(|v| v * v).sum();
    let s_max = s.iter().copied().fold(0.0f64, f64::max);
    let rank = s.iter().filter(|&&v| v > 1e-10 * s_max.max(f64::MIN_POSITIVE)).count();
    let mut cols: Vec<DVector<f64>> = (0..rank.min(2)).map(|i| svd.v_t.row(i).transpose()).collect();
    let degenerate = rank < 2;
    if degenerate {
        let mut rng = ChaCha8Rng::seed_from_u64(fallback_seed);
        while cols.len() < 2 {
            let mut cand = gaussian_matrix(&mut rng, d, 1).column(0).into_owned();
            for c in &cols {
                let proj = c.dot(&cand);
                cand -= c * proj;
            }
            let n = cand.norm();
            if n > 1e-8 {
                cols.push(cand / n);
            }
        }
    }
    for c in cols.iter_mut() {
        fix_sign(c);
    }
    let captured = if total > 0.0 {
        s.iter().take(rank.min(2)).map(|v| v * v).sum::<f64>() / total
    } else {
        0.0
    };
    Ok(PlaneFit {
        basis: DMatrix::from_columns(&cols),
        variance_captured: captured,
        degenerate,
    })
}

/// PCA plane of the `n_neighbors` pool inputs nearest to `center`.
pub fn local_pca_plane(
    pool_inputs: &DMatrix<f64>,
    center: &DVector<f64>,
    n_neighbors: usize,
    fallback_seed: u64,
) -> Result<PlaneFit> {
    let ids = knn(pool_inputs, center, n_neighbors.min(pool_inputs.nrows()))?;
    pca_plane(&select_rows(pool_inputs, &ids), fallback_seed)
}

/// Seeded random orthonormal 2-frame.
pub fn random_plane(d: usize, seed: u64) -> Result<DMatrix<f64>> {
    if d < 2 {
        return Err(HolonomyError::InvalidDimension(format!(
            "random plane needs d ≥ 2, got {d}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(orthonormal_columns(&gaussian_matrix(&mut rng, d, 2)))
}

/// Regular `L`-gon of radius `r` in the plane spanned by the columns of
/// `basis`, starting on the first basis direction.
pub fn circle_loop(center: &DVector<f64>, basis: &DMatrix<f64>, radius: f64, n_points: usize) -> Result<InputLoop> {
    if !(radius >= 0.0 && radius.is_finite()) {
        return Err(HolonomyError::InvalidArgument(format!(
            "radius {radius} must be finite and ≥ 0"
        )));
    }
    let min_points = if radius == 0.0 { 1 } else { 3 };
    if n_points < min_points {
        return Err(HolonomyError::InvalidArgument(format!(
            "circle needs at least {min_points} points"
        )));
    }
    if basis.shape() != (center.len(), 2) {
        return Err(HolonomyError::DimensionMismatch {
            context: "circle plane basis",
            expected: center.len(),
            found: basis.nrows(),
        });
    }
    let b1 = basis.column(0);
    let b2 = basis.column(1);
    let mut motions = Vec::with_capacity(n_points + 1);
    let mut points = Vec::with_capacity(n_points + 1);
    for i in 0..n_points {
        let theta = 2.0 * std::f64::consts::PI * i as f64 / n_points as f64;
        let offset: DVector<f64> = (b1 * theta.cos() + b2 * theta.sin()) * radius;
        points.push(center + &offset);
        motions.push(Motion::Translate(offset));
    }
    points.push(points[0].clone());
    motions.push(motions[0].clone());
    Ok(InputLoop {
        kind: if radius == 0.0 {
            LoopKind::SelfLoop
        } else {
            LoopKind::PcaCircle
        },
        points,
        motions,
        radius,
    })
}

/// Zero-radius loop with `n_points` edges at `center`.
pub fn self_loop(center: &DVector<f64>, n_points: usize) -> InputLoop {
    let d = center.len();
    let basis = DMatrix::from_fn(d, 2, |r, c| if r == c { 1.0 } else { 0.0 });
    let mut lp = circle_loop(center, &basis, 0.0, n_points.max(1)).expect("valid self loop");
    lp.kind = LoopKind::SelfLoop;
    lp
}

/// The unit-square shift path (0,0) → (0,1) → (1,1) → (1,0) → (0,0).
pub const UNIT_SQUARE_PATH: [(i64, i64); 5] = [(0, 0), (0, 1), (1, 1), (1, 0), (0, 0)];

/// Circular shift (numpy `roll` semantics): `out[(y+dy) % h][(x+dx) % w] = in[y][x]`.
pub fn circular_shift(image: &DMatrix<f64>, dy: i64, dx: i64) -> DMatrix<f64> {
    let (h, w) = image.shape();
    DMatrix::from_fn(h, w, |y, x| {
        let sy = (y as i64 - dy).rem_euclid(h as i64) as usize;
        let sx = (x as i64 - dx).rem_euclid(w as i64) as usize;
        image[(sy, sx)]
    })
}

pub fn flatten_image(image: &DMatrix<f64>) -> DVector<f64> {
    let (h, w) = image.shape();
    DVector::from_fn(h * w, |i, _| image[(i / w, i % w)])
}

pub fn unflatten_image(flat: &DVector<f64>, height: usize, width: usize) -> DMatrix<f64> {
    assert_eq!(flat.len(), height * width, "image size mismatch");
    DMatrix::from_fn(height, width, |y, x| flat[y * width + x])
}

fn shift_flat(flat: &DVector<f64>, h: usize, w: usize, dy: i64, dx: i64) -> DVector<f64> {
    assert_eq!(flat.len(), h * w, "image size mismatch");
    DVector::from_fn(h * w, |i, _| {
        let (y, x) = (i / w, i % w);
        let sy = (y as i64 - dy).rem_euclid(h as i64) as usize;
        let sx = (x as i64 - dx).rem_euclid(w as i64) as usize;
        flat[sy * w + sx]
    })
}

/// Circularly shifted copies of `image`, one per absolute shift in the
/// path; the path must start and end at (0, 0).
pub fn translation_loop(image: &DMatrix<f64>, shifts: &[(i64, i64)]) -> Result<Vec<DMatrix<f64>>> {
    if shifts.first() != Some(&(0, 0)) || shifts.last() != Some(&(0, 0)) {
        return Err(HolonomyError::NotClosed);
    }
    let mut out: Vec<DMatrix<f64>> = shifts.iter().map(|&(dy, dx)| circular_shift(image, dy, dx)).collect();
    let first = out[0].clone();
    *out.last_mut().expect("non-empty") = first;
    Ok(out)
}

/// [`translation_loop`] as an [`InputLoop`] over flattened images.
pub fn translation_input_loop(image: &DMatrix<f64>, shifts: &[(i64, i64)]) -> Result<InputLoop> {
    let images = translation_loop(image, shifts)?;
    if shifts.len() < 2 {
        return Err(HolonomyError::InvalidArgument(
            "translation loop needs at least one step".into(),
        ));
    }
    let (height, width) = image.shape();
    Ok(InputLoop {
        kind: LoopKind::Translation,
        points: images.iter().map(flatten_image).collect(),
        motions: shifts
            .iter()
            .map(|&(dy, dx)| Motion::Shift { dy, dx, height, width })
            .collect(),
        radius: 1.0,
    })
}

/// Declarative loop description.
#[derive(Debug, Clone, PartialEq)]
pub struct LoopSpec {
    pub kind: LoopKind,
    pub center: DVector<f64>,
    pub radius: f64,
    pub n_points: usize,
    pub basis: Option<DMatrix<f64>>,
    pub shifts: Vec<(i64, i64)>,
    pub image_shape: Option<(usize, usize)>,
    pub seed: u64,
}

impl LoopSpec {
    pub fn build(&self) -> Result<InputLoop> {
        match self.kind {
            LoopKind::SelfLoop => Ok(self_loop(&self.center, self.n_points)),
            LoopKind::PcaCircle => {
                let basis = self
                    .basis
                    .as_ref()
                    .ok_or_else(|| HolonomyError::InvalidArgument("pca circle needs a plane basis".into()))?;
                circle_loop(&self.center, basis, self.radius, self.n_points)
            }
            LoopKind::RandomCircle => {
                let basis = random_plane(self.center.len(), self.seed)?;
                let mut lp = circle_loop(&self.center, &basis, self.radius, self.n_points)?;
                lp.kind = LoopKind::RandomCircle;
                Ok(lp)
            }
            LoopKind::Translation => {
                let (h, w) = self
                    .image_shape
                    .ok_or_else(|| HolonomyError::InvalidArgument("translation loop needs an image shape".into()))?;
                translation_input_loop(&unflatten_image(&self.center, h, w), &self.shifts)
            }
            LoopKind::Custom => Err(HolonomyError::InvalidArgument(
                "custom loops are built with InputLoop::from_points".into(),
            )),
        }
    }
}
