use std::ffi::{c_void, CStr};
use std::path::Path;
use std::process::Command;
use std::ptr;

use nalgebra::DVector;
use rep_holonomy::config::EstimatorConfig;
use rep_holonomy::holonomy::HolonomyEstimator;
use rep_holonomy::loops::{circle_loop, random_plane, InputLoop};
use rep_holonomy::models::{build_pool, gaussian_inputs, make_mlp, FeatureMap, Featurizer};
use rep_holonomy_ffi::*;

fn row_major(m: &nalgebra::DMatrix<f64>) -> Vec<f64> {
    m.transpose().as_slice().to_vec()
}

fn last_error() -> String {
    unsafe { CStr::from_ptr(hol_last_error()) }
        .to_string_lossy()
        .into_owned()
}

unsafe extern "C" fn mlp_callback(user: *mut c_void, x: *const f64, d: usize, out: *mut f64, p: usize) -> i32 {
    let map = &*(user as *const FeatureMap);
    let x = DVector::from_column_slice(std::slice::from_raw_parts(x, d));
    match map.eval(&x) {
        Ok(z) if z.len() == p => {
            ptr::copy_nonoverlapping(z.as_ptr(), out, p);
            0
        }
        _ => 1,
    }
}

unsafe extern "C" fn failing_callback(_: *mut c_void, _: *const f64, _: usize, _: *mut f64, _: usize) -> i32 {
    7
}

struct Fixture {
    map: FeatureMap,
    inputs: nalgebra::DMatrix<f64>,
    feats: nalgebra::DMatrix<f64>,
}

fn fixture() -> Fixture {
    let map = make_mlp(6, &[16, 8], 1.0, 3).unwrap();
    let inputs = gaussian_inputs(256, 6, 11);
    let feats = map.eval_rows(&inputs).unwrap();
    Fixture { map, inputs, feats }
}

fn small_config() -> HolConfig {
    let mut c = HolConfig {
        k: 0,
        q: 0,
        group: 99,
        whitening: 0,
        neighbor_mode: 0,
        centering: 0,
        eigen_floor: 0.0,
    };
    assert_eq!(unsafe { hol_default_config(&mut c) }, HolStatus::Ok);
    c.k = 48;
    c.q = 8;
    c
}

fn new_pool(fx: &Fixture, with_inputs: bool) -> *mut HolPool {
    let mut pool = ptr::null_mut();
    let data = row_major(&fx.feats);
    let st = unsafe { hol_pool_new(data.as_ptr(), fx.feats.nrows(), fx.feats.ncols(), &mut pool) };
    assert_eq!(st, HolStatus::Ok, "{}", last_error());
    if with_inputs {
        let inp = row_major(&fx.inputs);
        let st = unsafe { hol_pool_set_inputs(pool, inp.as_ptr(), fx.inputs.nrows(), fx.inputs.ncols()) };
        assert_eq!(st, HolStatus::Ok, "{}", last_error());
    }
    pool
}

fn test_loop() -> InputLoop {
    let center = gaussian_inputs(1, 6, 5).row(0).transpose();
    let basis = random_plane(6, 1).unwrap();
    let lp = circle_loop(&center, &basis, 0.05, 8).unwrap();
    InputLoop::from_points(lp.points).unwrap()
}

#[test]
fn default_config_matches_core() {
    let mut c = small_config();
    unsafe { hol_default_config(&mut c) };
    let d = EstimatorConfig::default();
    assert_eq!((c.k, c.q), (d.k, d.q));
    assert_eq!(c.centering, HOL_CENTERING_ROW_TRANSPORT);
    assert_eq!(c.eigen_floor, d.eigen_floor);
}

#[test]
fn callback_estimate_matches_core() {
    let fx = fixture();
    let pool = new_pool(&fx, true);
    let cfg = small_config();
    let lp = test_loop();
    let pts: Vec<f64> = lp.points.iter().flat_map(|p| p.iter().copied()).collect();

    let mut res = ptr::null_mut();
    let st = unsafe {
        hol_estimate_callback(
            pool,
            &cfg,
            Some(mlp_callback),
            &fx.map as *const FeatureMap as *mut c_void,
            pts.as_ptr(),
            lp.points.len(),
            6,
            &mut res,
        )
    };
    assert_eq!(st, HolStatus::Ok, "{}", last_error());

    let core_pool = build_pool(&fx.map, fx.inputs.clone()).unwrap();
    let core_cfg = EstimatorConfig {
        k: 48,
        q: 8,
        ..EstimatorConfig::default()
    };
    let est = HolonomyEstimator::new(&core_pool, Some(&fx.map), core_cfg).unwrap();
    let expected = est.estimate(&lp, "ref").unwrap();

    let (mut h, mut p, mut edges) = (0.0, 0usize, 0usize);
    unsafe {
        assert_eq!(hol_result_h_norm(res, &mut h), HolStatus::Ok);
        assert_eq!(hol_result_dim(res, &mut p), HolStatus::Ok);
        assert_eq!(hol_result_n_edges(res, &mut edges), HolStatus::Ok);
    }
    assert_eq!((p, edges), (8, 8));
    assert!((h - expected.h_norm).abs() < 1e-12, "{h} vs {}", expected.h_norm);

    let mut mat = vec![0.0; p * p];
    let mut angles = vec![0.0; p];
    unsafe {
        assert_eq!(hol_result_matrix(res, mat.as_mut_ptr(), mat.len()), HolStatus::Ok);
        assert_eq!(hol_result_eigen_angles(res, angles.as_mut_ptr(), p), HolStatus::Ok);
    }
    for i in 0..p {
        for j in 0..p {
            assert!((mat[i * p + j] - expected.h[(i, j)]).abs() < 1e-12);
        }
        assert!((angles[i] - expected.eigen_angles[i]).abs() < 1e-9);
    }
    let mut h2 = 0.0;
    assert_eq!(unsafe { hol_h_norm(mat.as_ptr(), p, &mut h2) }, HolStatus::Ok);
    assert!((h2 - h).abs() < 1e-14);

    let mut short = vec![0.0; p * p - 1];
    let st = unsafe { hol_result_matrix(res, short.as_mut_ptr(), short.len()) };
    assert_eq!(st, HolStatus::DimensionMismatch);

    unsafe {
        hol_result_free(res);
        hol_pool_free(pool);
    }
}

#[test]
fn feature_estimate_endpoint_pair() {
    let fx = fixture();
    let pool = new_pool(&fx, false);
    let mut cfg = small_config();
    cfg.centering = HOL_CENTERING_ENDPOINT_PAIR;
    let lp = test_loop();
    let rows: Vec<f64> = lp
        .points
        .iter()
        .flat_map(|x| fx.map.eval(x).unwrap().iter().copied().collect::<Vec<_>>())
        .collect();
    let mut res = ptr::null_mut();
    let st = unsafe { hol_estimate_features(pool, &cfg, rows.as_ptr(), lp.points.len(), 8, &mut res) };
    assert_eq!(st, HolStatus::Ok, "{}", last_error());
    let mut h = f64::NAN;
    unsafe { hol_result_h_norm(res, &mut h) };
    assert!(h.is_finite() && (0.0..1.0).contains(&h));
    unsafe {
        hol_result_free(res);
        hol_pool_free(pool);
    }
}

#[test]
fn errors_map_to_status_codes() {
    let fx = fixture();
    let cfg = small_config();
    let mut pool = ptr::null_mut();
    unsafe {
        assert_eq!(hol_pool_new(ptr::null(), 4, 4, &mut pool), HolStatus::NullPointer);
        assert!(last_error().contains("null"));
    }

    let pool = new_pool(&fx, false);
    let lp = test_loop();
    let pts: Vec<f64> = lp.points.iter().flat_map(|p| p.iter().copied()).collect();
    let mut res = ptr::null_mut();

    // Row transport without pool inputs.
    let st = unsafe {
        hol_estimate_callback(
            pool,
            &cfg,
            Some(mlp_callback),
            &fx.map as *const FeatureMap as *mut c_void,
            pts.as_ptr(),
            lp.points.len(),
            6,
            &mut res,
        )
    };
    assert_eq!(st, HolStatus::MissingPoolInputs);
    assert!(res.is_null());

    // Open loop.
    let mut open = pts.clone();
    let n = open.len();
    open[n - 1] += 1.0;
    let mut ep = cfg;
    ep.centering = HOL_CENTERING_MIDPOINT_SHARED;
    let st = unsafe {
        hol_estimate_callback(
            pool,
            &ep,
            Some(mlp_callback),
            ptr::null_mut(),
            open.as_ptr(),
            lp.points.len(),
            6,
            &mut res,
        )
    };
    assert_eq!(st, HolStatus::LoopNotClosed);

    // Failing callback.
    let st = unsafe {
        hol_estimate_callback(
            pool,
            &ep,
            Some(failing_callback),
            ptr::null_mut(),
            pts.as_ptr(),
            lp.points.len(),
            6,
            &mut res,
        )
    };
    assert_eq!(st, HolStatus::Callback);
    assert!(last_error().contains("7"));

    // Bad enum code and q > k.
    let mut bad = cfg;
    bad.group = 42;
    let rows = [0.0; 3 * 8];
    assert_eq!(
        unsafe { hol_estimate_features(pool, &bad, rows.as_ptr(), 3, 8, &mut res) },
        HolStatus::InvalidArgument
    );
    let mut bad = cfg;
    bad.q = bad.k + 1;
    assert_eq!(
        unsafe { hol_estimate_features(pool, &bad, rows.as_ptr(), 3, 8, &mut res) },
        HolStatus::InvalidArgument
    );

    // Missing file.
    let mut p2 = ptr::null_mut();
    let st = unsafe { hol_pool_read(c"/nonexistent/pool.bin".as_ptr(), &mut p2) };
    assert_eq!(st, HolStatus::Io);

    unsafe {
        hol_pool_free(pool);
        hol_pool_free(ptr::null_mut());
        hol_result_free(ptr::null_mut());
    }
}

#[test]
fn pool_read_roundtrip() {
    let fx = fixture();
    let dir = std::env::temp_dir().join(format!("hol-ffi-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    let path = dir.join("pool.bin");
    rep_holonomy::io::write_pool(&path, &fx.feats).unwrap();
    let c_path = std::ffi::CString::new(path.to_str().unwrap()).unwrap();
    let mut pool = ptr::null_mut();
    assert_eq!(unsafe { hol_pool_read(c_path.as_ptr(), &mut pool) }, HolStatus::Ok);
    let (mut n, mut p) = (0, 0);
    assert_eq!(unsafe { hol_pool_shape(pool, &mut n, &mut p) }, HolStatus::Ok);
    assert_eq!((n, p), (256, 8));
    unsafe { hol_pool_free(pool) };
    std::fs::remove_dir_all(&dir).ok();
}

#[test]
fn version_is_nonempty() {
    let v = unsafe { CStr::from_ptr(hol_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

#[test]
fn header_declares_api_and_parses() {
    let header = Path::new(env!("CARGO_MANIFEST_DIR")).join("include/holonomy.h");
    let text = std::fs::read_to_string(&header).expect("generated header");
    for sym in [
        "hol_pool_new",
        "hol_estimate_callback",
        "hol_estimate_features",
        "hol_result_eigen_angles",
        "hol_last_error",
        "HolStatus",
        "HolConfig",
        "HOL_CENTERING_ROW_TRANSPORT",
    ] {
        assert!(text.contains(sym), "header lacks {sym}");
    }
    let cc = std::env::var("CC").unwrap_or_else(|_| "cc".into());
    match Command::new(&cc)
        .args(["-fsyntax-only", "-x", "c"])
        .arg(&header)
        .output()
    {
        Ok(out) => assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr)),
        Err(_) => eprintln!("skipping C syntax check: {cc} not found"),
    }
}

#[test]
fn c_smoke_example_runs() {
    let cc = std::env::var("CC").unwrap_or_else(|_| "cc".into());
    let manifest = Path::new(env!("CARGO_MANIFEST_DIR"));
    let exe = std::env::current_exe().unwrap();
    let lib_dir = exe.parent().and_then(Path::parent).unwrap().to_path_buf();
    if !lib_dir.join("librep_holonomy_ffi.so").exists() {
        eprintln!(
            "skipping C smoke test: shared library not built in {}",
            lib_dir.display()
        );
        return;
    }
    let out_bin = std::env::temp_dir().join(format!("hol-smoke-{}", std::process::id()));
    let compiled = Command::new(&cc)
        .arg("-I")
        .arg(manifest.join("include"))
        .arg(manifest.join("examples/smoke.c"))
        .arg("-L")
        .arg(&lib_dir)
        .arg(format!("-Wl,-rpath,{}", lib_dir.display()))
        .args(["-lrep_holonomy_ffi", "-lm", "-o"])
        .arg(&out_bin)
        .output();
    let Ok(compiled) = compiled else {
        eprintln!("skipping C smoke test: {cc} not found");
        return;
    };
    assert!(
        compiled.status.success(),
        "{}",
        String::from_utf8_lossy(&compiled.stderr)
    );
    let run = Command::new(&out_bin).output().unwrap();
    std::fs::remove_file(&out_bin).ok();
    let stdout = String::from_utf8_lossy(&run.stdout);
    assert!(run.status.success(), "{stdout}{}", String::from_utf8_lossy(&run.stderr));
    assert!(stdout.contains("h_norm"));
}
