//! Batch driver behind the `holonomy` binary.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::config::{CloudMode, ExperimentConfig};
use crate::error::{HolonomyError, Result};
use crate::experiments::{
    ablate, equivalias, invariance, kq_grid, mean_by_radius, npoints, result_row, similarity, sweep, EquivAliasConfig,
    PlaneKind, Workbench,
};
use crate::gauge::FeaturePool;
use crate::holonomy::HolonomyEstimator;
use crate::io::{
    format_f64, read_loop, read_pool, write_atomic, write_loop, write_loop_specs, write_pool, write_results,
    LoopRecord, LoopSpecFile, ResultRow,
};
use crate::models::Featurizer;

#[derive(Debug, Parser)]
#[command(name = "holonomy", version, about = "Gauge-invariant representation holonomy")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// Experiment config (TOML, with schema_version).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Feature pool file (HPOOL1).
    #[arg(long, global = true)]
    pub pool: Option<PathBuf>,
    /// Loop feature file (HLOOP1).
    #[arg(long, global = true)]
    pub loops: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    /// Worker threads (defaults to all cores).
    #[arg(long, global = true)]
    pub workers: Option<usize>,
    /// Comma-separated seeds replacing the config's seed list.
    #[arg(long, global = true, value_delimiter = ',')]
    pub seed_override: Option<Vec<u64>>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic pool, its inputs and loop feature files.
    Gen,
    /// Estimate one loop, natively or from pool and loop files.
    Holonomy {
        #[arg(long, default_value_t = 0.05)]
        radius: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Radius × seed grid.
    Sweep {
        /// Also write a whitespace-separated `.dat` of mean h_norm per radius.
        #[arg(long)]
        gnuplot: bool,
    },
    /// Gauge, affine, orientation, cyclic and null checks.
    Invariance {
        #[arg(long, default_value_t = 0.05)]
        radius: f64,
    },
    /// Guardrail ablations (group, whitening, neighbors, centering, plane).
    Ablate {
        #[arg(long, default_value_t = 0.01)]
        radius: f64,
    },
    /// Loop discretization sweep.
    Npoints {
        #[arg(long, default_value_t = 0.01)]
        radius: f64,
        #[arg(long, value_delimiter = ',', default_value = "6,8,12,16,24")]
        counts: Vec<usize>,
    },
    /// Small-radius and self-loop sweep.
    Smallr {
        #[arg(long, value_delimiter = ',', default_value = "0,0.0025,0.005,0.01,0.02,0.04")]
        radii: Vec<f64>,
        #[arg(long)]
        gnuplot: bool,
    },
    /// Translation loops through equivariant vs aliased convnets.
    Equivalias {
        #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
        images: Vec<u64>,
    },
    /// (k, q) sensitivity grid.
    Kq {
        #[arg(long, default_value_t = 0.01)]
        radius: f64,
        #[arg(long, value_delimiter = ',', default_value = "96,128,192")]
        ks: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_value = "32,64,96")]
        qs: Vec<usize>,
    },
    /// Linear CKA and orthogonal alignment versus loop holonomy.
    Similarity {
        #[arg(long, default_value_t = 0.05)]
        radius: f64,
        /// Pairs of first-layer gains, written `a:b`.
        #[arg(long, value_delimiter = ',', default_value = "1:0.5,1:0.8,1:1")]
        gains: Vec<String>,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Gen => "gen",
            Command::Holonomy { .. } => "holonomy",
            Command::Sweep { .. } => "sweep",
            Command::Invariance { .. } => "invariance",
            Command::Ablate { .. } => "ablate",
            Command::Npoints { .. } => "npoints",
            Command::Smallr { .. } => "smallr",
            Command::Equivalias { .. } => "equivalias",
            Command::Kq { .. } => "kq",
            Command::Similarity { .. } => "similarity",
        }
    }
}

/// Provenance written next to every artifact.
#[derive(Debug, Serialize)]
struct Manifest<'a> {
    command: &'a str,
    config_hash: String,
    estimator_hash: String,
    files: Vec<String>,
    notes: Vec<String>,
    config: &'a ExperimentConfig,
}

/// Outcome of one command: artifacts written plus whether every check held.
struct Outcome {
    files: Vec<String>,
    notes: Vec<String>,
    ok: bool,
}

impl Outcome {
    fn files(files: Vec<String>) -> Self {
        Self {
            files,
            notes: Vec::new(),
            ok: true,
        }
    }
}

fn load_config(path: Option<&Path>, seeds: Option<&Vec<u64>>) -> Result<ExperimentConfig> {
    let mut cfg = match path {
        None => ExperimentConfig::default(),
        Some(p) => {
            if !p.exists() {
                return Err(HolonomyError::InputMissing(p.to_path_buf()));
            }
            ExperimentConfig::parse(&fs::read_to_string(p)?)?
        }
    };
    if let Some(s) = seeds {
        if s.is_empty() {
            return Err(HolonomyError::ConfigInvalid("seed override is empty".into()));
        }
        cfg.estimator.seeds = s.clone();
    }
    cfg.estimator.validate()?;
    Ok(cfg)
}

fn csv_name(cmd: &str, hash: &str) -> String {
    format!("{cmd}-{hash}.csv")
}

fn write_rows(out: &Path, cmd: &str, hash: &str, rows: &[ResultRow]) -> Result<String> {
    let name = csv_name(cmd, hash);
    write_results(&out.join(&name), rows)?;
    Ok(name)
}

fn write_gnuplot(out: &Path, cmd: &str, hash: &str, rows: &[ResultRow], radii: &[f64]) -> Result<String> {
    let name = format!("{cmd}-{hash}.dat");
    let mut text = String::from("# radius mean_h_norm\n");
    for (r, h) in radii.iter().zip(mean_by_radius(rows, radii)) {
        writeln!(text, "{} {}", format_f64(*r), format_f64(h)).expect("string write");
    }
    write_atomic(&out.join(&name), text.as_bytes())?;
    Ok(name)
}

fn write_table(out: &Path, name: &str, header: &[&str], rows: &[Vec<String>]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let err = |e: csv::Error| HolonomyError::Malformed(e.to_string());
    w.write_record(header).map_err(err)?;
    for r in rows {
        w.write_record(r).map_err(err)?;
    }
    let bytes = w.into_inner().map_err(|e| HolonomyError::Malformed(e.to_string()))?;
    write_atomic(&out.join(name), &bytes)?;
    Ok(name.to_string())
}

fn cmd_gen(cfg: &ExperimentConfig, out: &Path) -> Result<Outcome> {
    let wb = Workbench::new(cfg.clone())?;
    write_pool(&out.join("pool.bin"), wb.pool.data())?;
    write_pool(&out.join("pool_inputs.bin"), &wb.inputs)?;
    let mut files = vec!["pool.bin".to_string(), "pool_inputs.bin".to_string()];
    let mut specs = LoopSpecFile {
        schema_version: crate::config::SCHEMA_VERSION,
        loops: Vec::new(),
    };
    let est = &cfg.estimator;
    for &seed in &est.seeds {
        for &r in &est.radii {
            let lp = wb.circle(seed, r, est.n_points, PlaneKind::Pca)?;
            let id = format!("s{seed}-r{r}");
            let feats = wb
                .map
                .eval_rows(&nalgebra::DMatrix::from_fn(lp.points.len(), lp.input_dim(), |i, j| {
                    lp.points[i][j]
                }))?;
            let name = format!("loop-{id}.bin");
            write_loop(&out.join(&name), &feats)?;
            files.push(name);
            let plane = crate::loops::local_pca_plane(&wb.inputs, &wb.center(seed), cfg.plane_neighbors, seed)?;
            specs.loops.push(LoopRecord {
                id,
                kind: lp.kind.as_str().into(),
                radius: r,
                n_points: est.n_points,
                seed,
                center: wb.center(seed).iter().copied().collect(),
                basis: (0..2)
                    .map(|c| plane.basis.column(c).iter().copied().collect())
                    .collect(),
                shifts: Vec::new(),
            });
        }
    }
    write_loop_specs(&out.join("loops.toml"), &specs)?;
    files.push("loops.toml".into());
    Ok(Outcome::files(files))
}

fn cmd_holonomy(
    global: &GlobalArgs,
    cfg: &ExperimentConfig,
    out: &Path,
    hash: &str,
    radius: f64,
    seed: u64,
) -> Result<Outcome> {
    let mut est_cfg = cfg.estimator.clone();
    let mut notes = Vec::new();
    let (res, row) = match (&global.pool, &global.loops) {
        (Some(pool_path), Some(loop_path)) => {
            if est_cfg.centering == CloudMode::RowTransport {
                log::warn!("feature files carry no pool inputs; using endpoint-pair centering");
                notes.push("centering switched to endpoint-pair for file inputs".into());
                est_cfg.centering = CloudMode::EndpointPair;
            }
            let pool = FeaturePool::new(read_pool(pool_path)?)?;
            est_cfg.n_pool = pool.n_pool();
            let feats = read_loop(loop_path)?;
            let est = HolonomyEstimator::new(&pool, None, est_cfg.clone())?;
            let id = loop_path
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| "loop".into());
            let res = est.estimate_features(&feats, &id)?;
            let row = ResultRow {
                loop_id: id,
                kind: "file".into(),
                radius: f64::NAN,
                n_points: feats.nrows() - 1,
                k: est_cfg.k,
                q: est_cfg.q,
                group: est_cfg.group.as_str().into(),
                whitening: est_cfg.whitening.as_str().into(),
                neighbor_mode: est_cfg.neighbor_mode.as_str().into(),
                h_norm: res.h_norm,
                max_eigen_angle: res.max_eigen_angle(),
                mean_iou: res.mean_iou(),
                min_var_captured: res.min_var_captured(),
                bias_floor_ref: f64::NAN,
                seed,
            };
            (res, row)
        }
        (None, None) => {
            let wb = Workbench::new(cfg.clone())?;
            let lp = wb.circle(seed, radius, est_cfg.n_points, PlaneKind::Pca)?;
            let res = wb
                .estimator(&est_cfg)?
                .estimate_with_floor(&lp, &format!("s{seed}-r{radius}"))?;
            let row = result_row(&res, &lp, &est_cfg, seed);
            (res, row)
        }
        _ => {
            return Err(HolonomyError::ConfigInvalid(
                "--pool and --loops must be given together".into(),
            ))
        }
    };
    println!("h_norm {}", format_f64(res.h_norm));
    let angles: Vec<String> = res.eigen_angles.iter().map(|a| format!("{a:.6e}")).collect();
    println!("eigen_angles {}", angles.join(" "));
    if let Some(f) = res.bias_floor {
        println!("bias_floor {}", format_f64(f));
    }
    let mut outcome = Outcome::files(vec![write_rows(out, "holonomy", hash, &[row])?]);
    outcome.notes = notes;
    Ok(outcome)
}

fn parse_gain_pairs(specs: &[String]) -> Result<Vec<(f64, f64)>> {
    specs
        .iter()
        .map(|s| {
            let (a, b) = s
                .split_once(':')
                .ok_or_else(|| HolonomyError::ConfigInvalid(format!("gain pair {s:?} is not a:b")))?;
            let parse = |v: &str| {
                v.trim()
                    .parse::<f64>()
                    .map_err(|e| HolonomyError::ConfigInvalid(format!("gain {v:?}: {e}")))
            };
            Ok((parse(a)?, parse(b)?))
        })
        .collect()
}

fn execute(cli: &Cli) -> Result<bool> {
    let cfg = load_config(cli.global.config.as_deref(), cli.global.seed_override.as_ref())?;
    if let Some(n) = cli.global.workers {
        if n == 0 {
            return Err(HolonomyError::ConfigInvalid("--workers must be positive".into()));
        }
        // A second call in the same process keeps the first pool, which is fine.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    let out = cli.global.out.as_path();
    fs::create_dir_all(out)?;
    let hash = cfg.hash();
    let seeds = cfg.estimator.seeds.clone();
    let name = cli.command.name();
    log::info!("{name}: config {hash}");

    let outcome = match &cli.command {
        Command::Gen => cmd_gen(&cfg, out)?,
        Command::Holonomy { radius, seed } => cmd_holonomy(&cli.global, &cfg, out, &hash, *radius, *seed)?,
        Command::Sweep { gnuplot } => {
            let wb = Workbench::new(cfg.clone())?;
            let rows = sweep(&wb, &cfg.estimator.radii, &seeds)?;
            let mut files = vec![write_rows(out, name, &hash, &rows)?];
            if *gnuplot {
                files.push(write_gnuplot(out, name, &hash, &rows, &cfg.estimator.radii)?);
            }
            Outcome::files(files)
        }
        Command::Smallr { radii, gnuplot } => {
            let wb = Workbench::new(cfg.clone())?;
            let rows = sweep(&wb, radii, &seeds)?;
            let mut files = vec![write_rows(out, name, &hash, &rows)?];
            if *gnuplot {
                files.push(write_gnuplot(out, name, &hash, &rows, radii)?);
            }
            Outcome::files(files)
        }
        Command::Invariance { radius } => {
            let wb = Workbench::new(cfg.clone())?;
            let mut table = Vec::new();
            let mut ok = true;
            for &seed in &seeds {
                for c in invariance(&wb, *radius, seed)? {
                    let status = if c.passed { "PASS" } else { "FAIL" };
                    println!(
                        "{status} {} seed={seed} measured={} tolerance={}",
                        c.name,
                        format_f64(c.measured),
                        format_f64(c.tolerance)
                    );
                    ok &= c.passed;
                    table.push(vec![
                        c.name.clone(),
                        seed.to_string(),
                        format_f64(c.measured),
                        format_f64(c.tolerance),
                        status.to_string(),
                    ]);
                }
            }
            let file = write_table(
                out,
                &csv_name(name, &hash),
                &["check", "seed", "measured", "tolerance", "status"],
                &table,
            )?;
            Outcome {
                files: vec![file],
                notes: Vec::new(),
                ok,
            }
        }
        Command::Ablate { radius } => {
            let wb = Workbench::new(cfg.clone())?;
            Outcome::files(vec![write_rows(out, name, &hash, &ablate(&wb, *radius, &seeds)?)?])
        }
        Command::Npoints { radius, counts } => {
            let wb = Workbench::new(cfg.clone())?;
            Outcome::files(vec![write_rows(
                out,
                name,
                &hash,
                &npoints(&wb, *radius, counts, &seeds)?,
            )?])
        }
        Command::Kq { radius, ks, qs } => {
            let wb = Workbench::new(cfg.clone())?;
            Outcome::files(vec![write_rows(
                out,
                name,
                &hash,
                &kq_grid(&wb, ks, qs, *radius, &seeds)?,
            )?])
        }
        Command::Equivalias { images } => {
            let ea = EquivAliasConfig {
                image_seeds: images.clone(),
                net_seed: cfg.map.seed,
                ..EquivAliasConfig::default()
            };
            let rows: Vec<Vec<String>> = equivalias(&ea)?
                .iter()
                .map(|r| {
                    println!(
                        "image {} equiv {} alias {} ratio {:.3e}",
                        r.image_seed,
                        format_f64(r.h_equiv),
                        format_f64(r.h_alias),
                        r.ratio()
                    );
                    vec![
                        r.image_seed.to_string(),
                        format_f64(r.h_equiv),
                        format_f64(r.h_alias),
                        format_f64(r.ratio()),
                    ]
                })
                .collect();
            Outcome::files(vec![write_table(
                out,
                &csv_name(name, &hash),
                &["image_seed", "h_equiv", "h_alias", "ratio"],
                &rows,
            )?])
        }
        Command::Similarity { radius, gains } => {
            let wb = Workbench::new(cfg.clone())?;
            let pairs = parse_gain_pairs(gains)?;
            let rows: Vec<Vec<String>> = similarity(&wb, &pairs, *radius, &seeds)?
                .iter()
                .map(|r| {
                    vec![
                        format_f64(r.gain_a),
                        format_f64(r.gain_b),
                        format_f64(r.cka),
                        format_f64(r.alignment_residual),
                        format_f64(r.h_a),
                        format_f64(r.h_b),
                        format_f64(r.holonomy_ratio()),
                    ]
                })
                .collect();
            Outcome::files(vec![write_table(
                out,
                &csv_name(name, &hash),
                &["gain_a", "gain_b", "cka", "alignment_residual", "h_a", "h_b", "h_ratio"],
                &rows,
            )?])
        }
    };

    let manifest = Manifest {
        command: name,
        config_hash: hash.clone(),
        estimator_hash: cfg.estimator.hash(),
        files: outcome.files.clone(),
        notes: outcome.notes.clone(),
        config: &cfg,
    };
    let text = toml::to_string(&manifest).map_err(|e| HolonomyError::Malformed(e.to_string()))?;
    write_atomic(&out.join(format!("manifest-{name}.toml")), text.as_bytes())?;
    for f in &outcome.files {
        println!("wrote {}", out.join(f).display());
    }
    Ok(outcome.ok)
}

/// Exit code 2 for usage and configuration errors.
pub const EXIT_ERROR: i32 = 2;
/// Exit code 1 when an invariance check fails.
pub const EXIT_CHECK_FAILED: i32 = 1;

fn error_kind(e: &HolonomyError) -> &'static str {
    match e {
        HolonomyError::ConfigInvalid(_) => "config_invalid",
        HolonomyError::InputMissing(_) => "input_missing",
        HolonomyError::UnknownCommand(_) => "unknown_command",
        HolonomyError::Io(_) => "io",
        _ => "estimator",
    }
}

/// Parse `args` and run; returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                ErrorKind::InvalidSubcommand => {
                    eprintln!(
                        "error: unknown_command: {}",
                        e.render().to_string().lines().next().unwrap_or("")
                    );
                    return EXIT_ERROR;
                }
                _ => EXIT_ERROR,
            };
            let _ = e.print();
            return code;
        }
    };
    match execute(&cli) {
        Ok(true) => 0,
        Ok(false) => EXIT_CHECK_FAILED,
        Err(e) => {
            eprintln!("error: {}: {e}", error_kind(&e));
            EXIT_ERROR
        }
    }
}

pub fn init_logging() {
    let env = env_logger::Env::new().filter_or("HOLONOMY_LOG", "warn");
    let _ = env_logger::Builder::from_env(env).try_init();
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_global_flags_after_subcommand() {
        let cli = Cli::try_parse_from([
            "holonomy",
            "sweep",
            "--out",
            "/tmp/x",
            "--workers",
            "2",
            "--seed-override",
            "3,4",
        ])
        .unwrap();
        assert_eq!(cli.global.workers, Some(2));
        assert_eq!(cli.global.seed_override, Some(vec![3, 4]));
        assert!(matches!(cli.command, Command::Sweep { gnuplot: false }));
    }

    #[test]
    fn unknown_command_and_missing_config_fail() {
        assert_eq!(run(["holonomy", "frobnicate"]), EXIT_ERROR);
        let dir = tempfile::tempdir().unwrap();
        let missing = dir.path().join("nope.toml");
        assert_eq!(
            run([
                "holonomy".into(),
                "sweep".into(),
                OsString::from("--config"),
                missing.into_os_string(),
            ]),
            EXIT_ERROR
        );
    }

    #[test]
    fn gain_pairs_parse() {
        assert_eq!(
            parse_gain_pairs(&["1:0.5".into(), " 2 : 3 ".into()]).unwrap(),
            vec![(1.0, 0.5), (2.0, 3.0)]
        );
        assert!(parse_gain_pairs(&["1".into()]).is_err());
    }
}
