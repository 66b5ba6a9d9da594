//! Experiment drivers shared by the CLI and the acceptance suite.
//!
//! Every driver is deterministic given its configuration: loops are built
//! from seeded centers, work is spread over loops with rayon, and results
//! come back in construction order.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::config::{CloudMode, EstimatorConfig, ExperimentConfig, Group, MapConfig, NeighborMode, WhiteningMode};
use crate::diagnostics::{linear_cka, orthogonal_alignment};
use crate::error::{HolonomyError, Result};
use crate::gauge::FeaturePool;
use crate::holonomy::{h_norm, HolonomyEstimator, HolonomyResult};
use crate::io::ResultRow;
use crate::linalg::{random_orthogonal, random_rotation};
use crate::loops::{
    circle_loop, local_pca_plane, random_plane, translation_input_loop, InputLoop, LoopKind, UNIT_SQUARE_PATH,
};
use crate::models::{
    blob_image, build_pool, gaussian_inputs, make_affine, make_alias_conv, make_equiv_conv, make_mlp,
    shift_orbit_inputs, FeatureMap, Featurizer, IMAGE_SIDE,
};

/// Offset separating loop-center seeds from pool and map seeds.
pub const CENTER_SEED_OFFSET: u64 = 10_000;

pub fn build_map(cfg: &MapConfig) -> Result<FeatureMap> {
    match cfg.kind.as_str() {
        "mlp" => make_mlp(cfg.input_dim, &cfg.widths, cfg.gain, cfg.seed),
        "mlp-linear" => Ok(make_mlp(cfg.input_dim, &cfg.widths, cfg.gain, cfg.seed)?.linearize()),
        "affine" => Ok(make_affine(cfg.input_dim, cfg.output_dim, cfg.seed)),
        "identity" => Ok(FeatureMap::Identity { dim: cfg.input_dim }),
        "equiv_conv" => Ok(make_equiv_conv(cfg.seed)),
        "alias_conv" => Ok(make_alias_conv(cfg.seed)),
        other => Err(HolonomyError::ConfigInvalid(format!("unknown map kind {other:?}"))),
    }
}

/// Which plane a circle loop lies in.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlaneKind {
    Pca,
    Random,
}

/// A synthetic map with its Gaussian input pool.
pub struct Workbench {
    pub config: ExperimentConfig,
    pub map: FeatureMap,
    pub inputs: DMatrix<f64>,
    pub pool: FeaturePool,
}

impl Workbench {
    pub fn new(config: ExperimentConfig) -> Result<Self> {
        let map = build_map(&config.map)?;
        Self::with_map(config, map)
    }

    pub fn with_map(config: ExperimentConfig, map: FeatureMap) -> Result<Self> {
        let inputs = gaussian_inputs(config.estimator.n_pool, map.input_dim(), config.pool_seed);
        let pool = build_pool(&map, inputs.clone())?;
        Ok(Self {
            config,
            map,
            inputs,
            pool,
        })
    }

    /// Same pool inputs pushed through a different map.
    pub fn remapped(&self, map: FeatureMap) -> Result<Self> {
        let pool = build_pool(&map, self.inputs.clone())?;
        Ok(Self {
            config: self.config.clone(),
            map,
            inputs: self.inputs.clone(),
            pool,
        })
    }

    pub fn center(&self, seed: u64) -> DVector<f64> {
        gaussian_inputs(1, self.map.input_dim(), CENTER_SEED_OFFSET + seed)
            .row(0)
            .transpose()
    }

    pub fn circle(&self, seed: u64, radius: f64, n_points: usize, plane: PlaneKind) -> Result<InputLoop> {
        let center = self.center(seed);
        let basis = match plane {
            PlaneKind::Pca => local_pca_plane(&self.inputs, &center, self.config.plane_neighbors, seed)?.basis,
            PlaneKind::Random => random_plane(center.len(), seed)?,
        };
        let mut lp = circle_loop(&center, &basis, radius, n_points)?;
        if radius > 0.0 && plane == PlaneKind::Random {
            lp.kind = LoopKind::RandomCircle;
        }
        Ok(lp)
    }

    pub fn estimator(&self, cfg: &EstimatorConfig) -> Result<HolonomyEstimator<'_>> {
        HolonomyEstimator::new(&self.pool, Some(&self.map), cfg.clone())
    }
}

pub fn result_row(res: &HolonomyResult, lp: &InputLoop, cfg: &EstimatorConfig, seed: u64) -> ResultRow {
    ResultRow {
        loop_id: res.loop_id.clone(),
        kind: lp.kind.as_str().to_string(),
        radius: lp.radius,
        n_points: lp.n_edges(),
        k: cfg.k,
        q: cfg.q,
        group: cfg.group.as_str().to_string(),
        whitening: cfg.whitening.as_str().to_string(),
        neighbor_mode: cfg.neighbor_mode.as_str().to_string(),
        h_norm: res.h_norm,
        max_eigen_angle: res.max_eigen_angle(),
        mean_iou: res.mean_iou(),
        min_var_captured: res.min_var_captured(),
        bias_floor_ref: res.bias_floor.unwrap_or(f64::NAN),
        seed,
    }
}

/// One loop to evaluate: which seed/loop index, radius, L and plane.
#[derive(Debug, Clone)]
struct Job {
    id: String,
    seed: u64,
    center_seed: u64,
    radius: f64,
    n_points: usize,
    plane: PlaneKind,
    cfg: EstimatorConfig,
}

fn run_jobs(wb: &Workbench, jobs: &[Job], with_floor: bool) -> Result<Vec<ResultRow>> {
    jobs.par_iter()
        .map(|job| {
            let est = wb.estimator(&job.cfg)?;
            let lp = wb.circle(job.center_seed, job.radius, job.n_points, job.plane)?;
            let res = if with_floor {
                est.estimate_with_floor(&lp, &job.id)?
            } else {
                est.estimate(&lp, &job.id)?
            };
            Ok(result_row(&res, &lp, &job.cfg, job.seed))
        })
        .collect()
}

fn center_seed(seed: u64, loop_index: usize, loops_per_seed: usize) -> u64 {
    seed * loops_per_seed as u64 + loop_index as u64
}

/// Radius × seed grid with per-loop self-loop floors.
pub fn sweep(wb: &Workbench, radii: &[f64], seeds: &[u64]) -> Result<Vec<ResultRow>> {
    let cfg = &wb.config.estimator;
    let per = wb.config.loops_per_seed.max(1);
    let mut jobs = Vec::new();
    for &seed in seeds {
        for li in 0..per {
            for &r in radii {
                jobs.push(Job {
                    id: format!("s{seed}-l{li}-r{r}"),
                    seed,
                    center_seed: center_seed(seed, li, per),
                    radius: r,
                    n_points: cfg.n_points,
                    plane: PlaneKind::Pca,
                    cfg: cfg.clone(),
                });
            }
        }
    }
    run_jobs(wb, &jobs, true)
}

/// Loop-discretization sweep at a fixed radius.
pub fn npoints(wb: &Workbench, radius: f64, counts: &[usize], seeds: &[u64]) -> Result<Vec<ResultRow>> {
    let cfg = &wb.config.estimator;
    let mut jobs = Vec::new();
    for &seed in seeds {
        for &n in counts {
            jobs.push(Job {
                id: format!("s{seed}-n{n}"),
                seed,
                center_seed: seed,
                radius,
                n_points: n,
                plane: PlaneKind::Pca,
                cfg: cfg.clone(),
            });
        }
    }
    run_jobs(wb, &jobs, false)
}

/// The ablation variants: baseline plus one switch flipped at a time.
pub fn ablation_variants(base: &EstimatorConfig) -> Vec<(&'static str, EstimatorConfig, PlaneKind)> {
    let with = |f: &dyn Fn(&mut EstimatorConfig)| {
        let mut c = base.clone();
        f(&mut c);
        c
    };
    vec![
        ("baseline", base.clone(), PlaneKind::Pca),
        ("group-O", with(&|c| c.group = Group::Orthogonal), PlaneKind::Pca),
        (
            "whiten-zscore",
            with(&|c| c.whitening = WhiteningMode::Zscore),
            PlaneKind::Pca,
        ),
        (
            "whiten-local",
            with(&|c| c.whitening = WhiteningMode::Local),
            PlaneKind::Pca,
        ),
        (
            "neighbors-separate",
            with(&|c| c.neighbor_mode = NeighborMode::Separate),
            PlaneKind::Pca,
        ),
        (
            "centering-endpoint",
            with(&|c| c.centering = CloudMode::EndpointPair),
            PlaneKind::Pca,
        ),
        ("random-plane", base.clone(), PlaneKind::Random),
    ]
}

pub fn ablate(wb: &Workbench, radius: f64, seeds: &[u64]) -> Result<Vec<ResultRow>> {
    let mut jobs = Vec::new();
    for (name, cfg, plane) in ablation_variants(&wb.config.estimator) {
        for &seed in seeds {
            jobs.push(Job {
                id: format!("{name}-s{seed}"),
                seed,
                center_seed: seed,
                radius,
                n_points: cfg.n_points,
                plane,
                cfg: cfg.clone(),
            });
        }
    }
    run_jobs(wb, &jobs, false)
}

/// (k, q) grid; combinations with q > k are skipped.
pub fn kq_grid(wb: &Workbench, ks: &[usize], qs: &[usize], radius: f64, seeds: &[u64]) -> Result<Vec<ResultRow>> {
    let mut jobs = Vec::new();
    for &k in ks {
        for &q in qs {
            if q > k {
                continue;
            }
            let cfg = EstimatorConfig {
                k,
                q,
                ..wb.config.estimator.clone()
            };
            for &seed in seeds {
                jobs.push(Job {
                    id: format!("k{k}-q{q}-s{seed}"),
                    seed,
                    center_seed: seed,
                    radius,
                    n_points: cfg.n_points,
                    plane: PlaneKind::Pca,
                    cfg: cfg.clone(),
                });
            }
        }
    }
    run_jobs(wb, &jobs, false)
}

#[derive(Debug, Clone, PartialEq)]
pub struct InvarianceCheck {
    pub name: String,
    pub measured: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl InvarianceCheck {
    fn new(name: &str, measured: f64, tolerance: f64) -> Self {
        Self {
            name: name.to_string(),
            measured,
            tolerance,
            passed: measured <= tolerance,
        }
    }
}

/// Sorted-multiset L2 distance between two angle spectra.
pub fn spectrum_gap(a: &[f64], b: &[f64]) -> f64 {
    let mut x = a.to_vec();
    let mut y = b.to_vec();
    x.sort_by(f64::total_cmp);
    y.sort_by(f64::total_cmp);
    x.iter().zip(&y).map(|(u, v)| (u - v).powi(2)).sum::<f64>().sqrt()
}

/// Random matrix with singular values spread log-uniformly in `[1, cond]`.
pub fn well_conditioned<R: rand::Rng>(rng: &mut R, p: usize, cond: f64) -> DMatrix<f64> {
    let u = random_orthogonal(rng, p);
    let v = random_orthogonal(rng, p);
    let s = DVector::from_fn(p, |i, _| {
        if p == 1 {
            1.0
        } else {
            cond.powf(i as f64 / (p - 1) as f64)
        }
    });
    u * DMatrix::from_diagonal(&s) * v.transpose()
}

/// Gauge, affine, cyclic, orientation and linear-null checks on one loop.
pub fn invariance(wb: &Workbench, radius: f64, seed: u64) -> Result<Vec<InvarianceCheck>> {
    let cfg = &wb.config.estimator;
    let lp = wb.circle(seed, radius, cfg.n_points, PlaneKind::Pca)?;
    let est = wb.estimator(cfg)?;
    let base = est.estimate(&lp, "base")?;
    let p = wb.map.output_dim();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let mut checks = Vec::new();

    let u = random_rotation(&mut rng, p);
    let rotated = wb.remapped(wb.map.clone().reparameterized(u, DVector::zeros(p))?)?;
    let rot = rotated.estimator(cfg)?.estimate(&lp, "gauge")?;
    checks.push(InvarianceCheck::new(
        "gauge_h_norm",
        (rot.h_norm - base.h_norm).abs(),
        1e-9,
    ));
    checks.push(InvarianceCheck::new(
        "gauge_spectrum",
        spectrum_gap(&rot.eigen_angles, &base.eigen_angles),
        1e-6,
    ));

    if cfg.whitening == WhiteningMode::Zca {
        let a = well_conditioned(&mut rng, p, 100.0);
        let b = crate::linalg::gaussian_vector(&mut rng, p);
        let affine = wb.remapped(wb.map.clone().reparameterized(a, b)?)?;
        let aff = affine.estimator(cfg)?.estimate(&lp, "affine")?;
        checks.push(InvarianceCheck::new(
            "affine_h_norm",
            (aff.h_norm - base.h_norm).abs(),
            1e-8,
        ));
    }

    let shifted = est.estimate(&lp.cycled(lp.n_edges() / 3), "cyclic")?;
    checks.push(InvarianceCheck::new(
        "cyclic_h_norm",
        (shifted.h_norm - base.h_norm).abs(),
        1e-10,
    ));
    checks.push(InvarianceCheck::new(
        "cyclic_spectrum",
        spectrum_gap(&shifted.eigen_angles, &base.eigen_angles),
        1e-6,
    ));

    let back = est.estimate(&lp.reversed(), "reversed")?;
    checks.push(InvarianceCheck::new(
        "orientation_gap",
        h_norm(&(back.h * &base.h)),
        1e-8,
    ));

    let linear = wb.remapped(wb.map.linearize())?;
    let null = linear.estimator(cfg)?.estimate(&lp, "null")?;
    checks.push(InvarianceCheck::new("linear_null", null.h_norm, 1e-9));
    Ok(checks)
}

/// Shifted copies of the seeded blob images, 256 per base image.
pub fn blob_bases(n_bases: usize) -> Vec<DMatrix<f64>> {
    (0..n_bases as u64)
        .map(|s| blob_image(IMAGE_SIDE, IMAGE_SIDE, s))
        .collect()
}

/// Settings for the translation-loop convnet comparison.
#[derive(Debug, Clone)]
pub struct EquivAliasConfig {
    pub n_bases: usize,
    pub k: usize,
    pub net_seed: u64,
    pub image_seeds: Vec<u64>,
}

impl Default for EquivAliasConfig {
    fn default() -> Self {
        Self {
            n_bases: 8,
            k: 768,
            net_seed: 0,
            image_seeds: vec![0, 1, 2],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EquivAliasRow {
    pub image_seed: u64,
    pub h_equiv: f64,
    pub h_alias: f64,
}

impl EquivAliasRow {
    pub fn ratio(&self) -> f64 {
        self.h_alias / self.h_equiv.max(f64::MIN_POSITIVE)
    }
}

/// Translation-loop holonomy of the equivariant and aliased convnets over a
/// shift-closed blob pool; q equals each net's feature dimension.
pub fn equivalias(cfg: &EquivAliasConfig) -> Result<Vec<EquivAliasRow>> {
    let bases = blob_bases(cfg.n_bases);
    let inputs = shift_orbit_inputs(&bases);
    let mut per_net = Vec::new();
    for map in [make_equiv_conv(cfg.net_seed), make_alias_conv(cfg.net_seed)] {
        let pool = build_pool(&map, inputs.clone())?;
        let est_cfg = EstimatorConfig {
            k: cfg.k,
            q: map.output_dim(),
            n_pool: inputs.nrows(),
            ..EstimatorConfig::default()
        };
        let est = HolonomyEstimator::new(&pool, Some(&map), est_cfg)?;
        let values: Vec<f64> = cfg
            .image_seeds
            .iter()
            .map(|&s| {
                let img = bases
                    .get(s as usize)
                    .cloned()
                    .unwrap_or_else(|| blob_image(IMAGE_SIDE, IMAGE_SIDE, s));
                let lp = translation_input_loop(&img, &UNIT_SQUARE_PATH)?;
                Ok(est.estimate(&lp, &format!("img{s}"))?.h_norm)
            })
            .collect::<Result<_>>()?;
        per_net.push(values);
    }
    Ok(cfg
        .image_seeds
        .iter()
        .enumerate()
        .map(|(i, &s)| EquivAliasRow {
            image_seed: s,
            h_equiv: per_net[0][i],
            h_alias: per_net[1][i],
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityRow {
    pub gain_a: f64,
    pub gain_b: f64,
    pub cka: f64,
    pub alignment_residual: f64,
    pub h_a: f64,
    pub h_b: f64,
}

impl SimilarityRow {
    pub fn holonomy_ratio(&self) -> f64 {
        let (lo, hi) = if self.h_a < self.h_b {
            (self.h_a, self.h_b)
        } else {
            (self.h_b, self.h_a)
        };
        hi / lo.max(f64::MIN_POSITIVE)
    }
}

/// Mean h_norm over the seeded PCA circles of radius `radius`.
pub fn mean_holonomy(wb: &Workbench, radius: f64, seeds: &[u64]) -> Result<f64> {
    let est = wb.estimator(&wb.config.estimator)?;
    let values: Vec<f64> = seeds
        .par_iter()
        .map(|&s| {
            let lp = wb.circle(s, radius, wb.config.estimator.n_points, PlaneKind::Pca)?;
            Ok(est.estimate(&lp, "sim")?.h_norm)
        })
        .collect::<Result<_>>()?;
    Ok(values.iter().sum::<f64>() / values.len() as f64)
}

/// Pointwise similarity versus loop holonomy for MLPs that share weights
/// but differ in first-layer gain.
pub fn similarity(wb: &Workbench, gain_pairs: &[(f64, f64)], radius: f64, seeds: &[u64]) -> Result<Vec<SimilarityRow>> {
    let mc = &wb.config.map;
    gain_pairs
        .iter()
        .map(|&(ga, gb)| {
            let a = wb.remapped(make_mlp(mc.input_dim, &mc.widths, ga, mc.seed)?)?;
            let b = wb.remapped(make_mlp(mc.input_dim, &mc.widths, gb, mc.seed)?)?;
            let (q, residual) = orthogonal_alignment(a.pool.data(), b.pool.data())?;
            let cka = linear_cka(&(a.pool.data() * q), b.pool.data())?;
            Ok(SimilarityRow {
                gain_a: ga,
                gain_b: gb,
                cka,
                alignment_residual: residual,
                h_a: mean_holonomy(&a, radius, seeds)?,
                h_b: mean_holonomy(&b, radius, seeds)?,
            })
        })
        .collect()
}

/// Least-squares slope of `log y` against `log x`.
pub fn log_log_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let lx: Vec<f64> = xs.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|v| v.ln()).collect();
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let cov: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let var: f64 = lx.iter().map(|a| (a - mx).powi(2)).sum();
    cov / var
}

/// Mean h_norm per radius, averaged over rows with that radius.
pub fn mean_by_radius(rows: &[ResultRow], radii: &[f64]) -> Vec<f64> {
    radii
        .iter()
        .map(|&r| {
            let sel: Vec<f64> = rows.iter().filter(|x| x.radius == r).map(|x| x.h_norm).collect();
            sel.iter().sum::<f64>() / sel.len().max(1) as f64
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_bench(kind: &str) -> Workbench {
        let mut cfg = ExperimentConfig::default();
        cfg.estimator.n_pool = 512;
        cfg.estimator.k = 64;
        cfg.estimator.q = 32;
        cfg.map.kind = kind.into();
        cfg.plane_neighbors = 128;
        Workbench::new(cfg).unwrap()
    }

    #[test]
    fn build_map_kinds() {
        for kind in ["mlp", "mlp-linear", "affine", "identity", "equiv_conv", "alias_conv"] {
            let cfg = MapConfig {
                kind: kind.into(),
                ..MapConfig::default()
            };
            build_map(&cfg).unwrap();
        }
        let bad = MapConfig {
            kind: "resnet".into(),
            ..MapConfig::default()
        };
        assert!(matches!(build_map(&bad), Err(HolonomyError::ConfigInvalid(_))));
    }

    #[test]
    fn sweep_is_deterministic_and_ordered() {
        let wb = small_bench("mlp");
        let a = sweep(&wb, &[0.0, 0.05], &[0, 1]).unwrap();
        let b = sweep(&wb, &[0.0, 0.05], &[0, 1]).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 4);
        assert_eq!(a[0].loop_id, "s0-l0-r0");
        assert_eq!(a[0].kind, "self_loop");
        assert!(a[1].h_norm > a[1].bias_floor_ref);
    }

    #[test]
    fn invariance_checks_pass_on_affine_map() {
        let wb = small_bench("affine");
        let checks = invariance(&wb, 0.05, 0).unwrap();
        assert!(checks.iter().all(|c| c.passed), "{checks:?}");
    }

    #[test]
    fn well_conditioned_has_requested_condition() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = well_conditioned(&mut rng, 6, 100.0);
        let s = a.singular_values();
        let (mx, mn) = (s.max(), s.min());
        assert!((mx / mn - 100.0).abs() < 1e-8);
    }

    #[test]
    fn slope_of_power_law() {
        let xs = [1.0, 2.0, 4.0, 8.0];
        let ys: Vec<f64> = xs.iter().map(|x: &f64| 3.0 * x.powf(1.5)).collect();
        assert!((log_log_slope(&xs, &ys) - 1.5).abs() < 1e-12);
    }

    #[test]
    fn spectrum_gap_ignores_order() {
        assert_eq!(spectrum_gap(&[0.1, -0.1, 0.0], &[0.0, 0.1, -0.1]), 0.0);
    }
}
