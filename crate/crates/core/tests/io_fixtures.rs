//! Binary format conformance against fixtures written by an independent
//! implementation (`tests/fixtures/generate.py`).

use std::path::PathBuf;

use nalgebra::{dmatrix, DMatrix};
use rep_holonomy::gauge::make_readout;
use rep_holonomy::io::{
    decode_loop, decode_pool, encode_loop, encode_pool, read_loop, read_pool, read_results, results_from_str,
    write_results, ResultRow, RESULT_HEADER,
};
use rep_holonomy::HolonomyError;

fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("tests/fixtures")
        .join(name)
}

fn bytes(name: &str) -> Vec<u8> {
    std::fs::read(fixture(name)).expect("fixture present")
}

fn expected_pool() -> DMatrix<f64> {
    dmatrix![
        1.0, -2.0, 0.5;
        3.25, 4.0, -1e-3;
        0.0, 6.5, 1e10;
        -7.0, 0.125, 2.0
    ]
}

#[test]
fn pool_fixture_decodes_and_reencodes_identically() {
    let raw = bytes("pool_4x3.hpool");
    let m = decode_pool(&raw).unwrap();
    assert_eq!(m, expected_pool());
    assert_eq!(encode_pool(&m).unwrap(), raw);
    assert_eq!(read_pool(&fixture("pool_4x3.hpool")).unwrap(), m);
}

#[test]
fn loop_fixture_counts_edges_in_header() {
    let raw = bytes("loop_L4_p2.hloop");
    assert_eq!(u32::from_le_bytes(raw[8..12].try_into().unwrap()), 4);
    let m = decode_loop(&raw).unwrap();
    assert_eq!(m.shape(), (5, 2));
    assert_eq!(m.row(0), m.row(4));
    assert_eq!(encode_loop(&m).unwrap(), raw);
    assert_eq!(read_loop(&fixture("loop_L4_p2.hloop")).unwrap(), m);
}

#[test]
fn readout_basis_matches_independent_implementation() {
    let reference = decode_pool(&bytes("readout_16x4_seed42.hpool")).unwrap();
    let basis = make_readout(16, 4, 42).unwrap().basis;
    assert_eq!(basis.shape(), reference.shape());
    let diff = (&basis - &reference).amax();
    assert!(diff <= 1e-12, "max abs difference {diff:e}");
}

#[test]
fn corrupted_pool_files_are_rejected() {
    let raw = bytes("pool_4x3.hpool");

    let mut bad = raw.clone();
    bad[0] = b'X';
    assert!(matches!(decode_pool(&bad), Err(HolonomyError::BadMagic { .. })));

    assert!(matches!(decode_loop(&raw), Err(HolonomyError::BadMagic { .. })));

    let mut bad = raw.clone();
    bad[6] = 2;
    assert!(matches!(decode_pool(&bad), Err(HolonomyError::UnsupportedVersion(2))));

    let bad = &raw[..raw.len() - 1];
    assert!(matches!(decode_pool(bad), Err(HolonomyError::TruncatedPayload { .. })));
    assert!(matches!(
        decode_pool(&raw[..10]),
        Err(HolonomyError::TruncatedPayload { .. })
    ));

    let mut bad = raw.clone();
    bad.push(0);
    assert!(matches!(decode_pool(&bad), Err(HolonomyError::Malformed(_))));

    let mut bad = raw.clone();
    let at = 16 + 8 * 4; // row 1, col 1
    bad[at..at + 8].copy_from_slice(&f64::NAN.to_le_bytes());
    assert!(matches!(
        decode_pool(&bad),
        Err(HolonomyError::NonFiniteEntry { row: 1, col: 1 })
    ));
}

#[test]
fn loop_file_must_close_bitwise() {
    let mut raw = bytes("loop_L4_p2.hloop");
    let last_row = 16 + 8 * 2 * 4;
    let v = f64::from_le_bytes(raw[last_row..last_row + 8].try_into().unwrap());
    raw[last_row..last_row + 8].copy_from_slice(&(v + f64::EPSILON).to_le_bytes());
    assert!(matches!(decode_loop(&raw), Err(HolonomyError::LoopNotClosed)));
}

#[test]
fn missing_file_is_input_missing() {
    let err = read_pool(&fixture("absent.hpool")).unwrap_err();
    assert!(matches!(err, HolonomyError::InputMissing(_)));
}

fn sample_row(seed: u64) -> ResultRow {
    ResultRow {
        loop_id: format!("s{seed}-r0.05"),
        kind: "pca_circle".into(),
        radius: 0.05,
        n_points: 12,
        k: 128,
        q: 64,
        group: "SO".into(),
        whitening: "zca".into(),
        neighbor_mode: "shared".into(),
        h_norm: 1.0 / 3.0 * 1e-3,
        max_eigen_angle: 0.1,
        mean_iou: 0.97,
        min_var_captured: 0.8,
        bias_floor_ref: f64::NAN,
        seed,
    }
}

#[test]
fn results_csv_roundtrip_and_header() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("r.csv");
    let rows = vec![sample_row(0), sample_row(1)];
    write_results(&path, &rows).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    assert_eq!(text.lines().next().unwrap(), RESULT_HEADER.join(","));
    let back = read_results(&path).unwrap();
    assert_eq!(back.len(), 2);
    for (a, b) in rows.iter().zip(&back) {
        assert_eq!(a.loop_id, b.loop_id);
        assert_eq!(a.h_norm.to_bits(), b.h_norm.to_bits());
        assert!(b.bias_floor_ref.is_nan());
        assert_eq!(a.seed, b.seed);
    }

    write_results(&path, &[]).unwrap();
    let empty = std::fs::read_to_string(&path).unwrap();
    assert_eq!(empty.trim_end(), RESULT_HEADER.join(","));
    assert!(read_results(&path).unwrap().is_empty());

    assert!(results_from_str("a,b,c\n").is_err());
}
