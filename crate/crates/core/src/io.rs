//! Binary pool and loop-feature files, result CSVs, loop-spec TOML and the
//! IDX image reader.
//!
//! Both binary formats are a 6-byte ASCII magic, a `u16` version, two `u32`
//! dimensions and a row-major `f64` payload, all little-endian.

use std::fs;
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{HolonomyError, Result};

pub const POOL_MAGIC: &str = "HPOOL1";
pub const LOOP_MAGIC: &str = "HLOOP1";
pub const FORMAT_VERSION: u16 = 1;
const HEADER_LEN: usize = 6 + 2 + 4 + 4;

fn encode(magic: &str, rows_field: u32, m: &DMatrix<f64>) -> Vec<u8> {
    let (n, p) = m.shape();
    let mut out = Vec::with_capacity(HEADER_LEN + 8 * n * p);
    out.extend_from_slice(magic.as_bytes());
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&rows_field.to_le_bytes());
    out.extend_from_slice(&(p as u32).to_le_bytes());
    for i in 0..n {
        for j in 0..p {
            out.extend_from_slice(&m[(i, j)].to_le_bytes());
        }
    }
    out
}

fn u32_at(bytes: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(bytes[at..at + 4].try_into().expect("4 bytes"))
}

/// Parse a header and payload; `extra_rows` is 1 for loop files, whose
/// row field counts edges rather than rows.
fn decode(bytes: &[u8], magic: &'static str, extra_rows: usize) -> Result<DMatrix<f64>> {
    if bytes.len() < 6 || &bytes[..6] != magic.as_bytes() {
        return Err(HolonomyError::BadMagic { expected: magic });
    }
    if bytes.len() < HEADER_LEN {
        return Err(HolonomyError::TruncatedPayload {
            expected: HEADER_LEN,
            found: bytes.len(),
        });
    }
    let version = u16::from_le_bytes([bytes[6], bytes[7]]);
    if version != FORMAT_VERSION {
        return Err(HolonomyError::UnsupportedVersion(version));
    }
    let n = u32_at(bytes, 8) as usize + extra_rows;
    let p = u32_at(bytes, 12) as usize;
    let expected = n
        .checked_mul(p)
        .and_then(|v| v.checked_mul(8))
        .ok_or_else(|| HolonomyError::Malformed("dimensions overflow".into()))?;
    let payload = &bytes[HEADER_LEN..];
    if payload.len() < expected {
        return Err(HolonomyError::TruncatedPayload {
            expected,
            found: payload.len(),
        });
    }
    if payload.len() > expected {
        return Err(HolonomyError::Malformed(format!(
            "{} trailing bytes after payload",
            payload.len() - expected
        )));
    }
    let mut m = DMatrix::zeros(n, p);
    for i in 0..n {
        for j in 0..p {
            let at = 8 * (i * p + j);
            let v = f64::from_le_bytes(payload[at..at + 8].try_into().expect("8 bytes"));
            if !v.is_finite() {
                return Err(HolonomyError::NonFiniteEntry { row: i, col: j });
            }
            m[(i, j)] = v;
        }
    }
    Ok(m)
}

pub fn encode_pool(m: &DMatrix<f64>) -> Result<Vec<u8>> {
    check_finite(m)?;
    Ok(encode(POOL_MAGIC, m.nrows() as u32, m))
}

pub fn decode_pool(bytes: &[u8]) -> Result<DMatrix<f64>> {
    decode(bytes, POOL_MAGIC, 0)
}

/// Loop features are `(L+1) × p` with row `L` equal to row 0.
pub fn encode_loop(m: &DMatrix<f64>) -> Result<Vec<u8>> {
    check_closed(m)?;
    check_finite(m)?;
    Ok(encode(LOOP_MAGIC, (m.nrows() - 1) as u32, m))
}

pub fn decode_loop(bytes: &[u8]) -> Result<DMatrix<f64>> {
    let m = decode(bytes, LOOP_MAGIC, 1)?;
    check_closed(&m)?;
    Ok(m)
}

fn check_finite(m: &DMatrix<f64>) -> Result<()> {
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            if !m[(i, j)].is_finite() {
                return Err(HolonomyError::NonFiniteEntry { row: i, col: j });
            }
        }
    }
    Ok(())
}

fn check_closed(m: &DMatrix<f64>) -> Result<()> {
    let n = m.nrows();
    if n < 2 {
        return Err(HolonomyError::Malformed("loop file needs L ≥ 1".into()));
    }
    let same = (0..m.ncols()).all(|j| m[(0, j)].to_bits() == m[(n - 1, j)].to_bits());
    if !same {
        return Err(HolonomyError::LoopNotClosed);
    }
    Ok(())
}

/// Write via a temporary sibling and rename, so readers never see a
/// partially written file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

fn read_existing(path: &Path) -> Result<Vec<u8>> {
    if !path.exists() {
        return Err(HolonomyError::InputMissing(path.to_path_buf()));
    }
    Ok(fs::read(path)?)
}

pub fn write_pool(path: &Path, m: &DMatrix<f64>) -> Result<()> {
    write_atomic(path, &encode_pool(m)?)
}

pub fn read_pool(path: &Path) -> Result<DMatrix<f64>> {
    decode_pool(&read_existing(path)?)
}

pub fn write_loop(path: &Path, m: &DMatrix<f64>) -> Result<()> {
    write_atomic(path, &encode_loop(m)?)
}

pub fn read_loop(path: &Path) -> Result<DMatrix<f64>> {
    decode_loop(&read_existing(path)?)
}

pub const RESULT_HEADER: [&str; 15] = [
    "loop_id",
    "kind",
    "radius",
    "n_points",
    "k",
    "q",
    "group",
    "whitening",
    "neighbor_mode",
    "h_norm",
    "max_eigen_angle",
    "mean_iou",
    "min_var_captured",
    "bias_floor_ref",
    "seed",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub loop_id: String,
    pub kind: String,
    pub radius: f64,
    pub n_points: usize,
    pub k: usize,
    pub q: usize,
    pub group: String,
    pub whitening: String,
    pub neighbor_mode: String,
    pub h_norm: f64,
    pub max_eigen_angle: f64,
    pub mean_iou: f64,
    pub min_var_captured: f64,
    /// NaN when no floor was measured.
    pub bias_floor_ref: f64,
    pub seed: u64,
}

/// 17 significant digits, enough for an exact round-trip.
pub fn format_f64(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.16e}")
    } else {
        v.to_string()
    }
}

impl ResultRow {
    fn record(&self) -> [String; 15] {
        [
            self.loop_id.clone(),
            self.kind.clone(),
            format_f64(self.radius),
            self.n_points.to_string(),
            self.k.to_string(),
            self.q.to_string(),
            self.group.clone(),
            self.whitening.clone(),
            self.neighbor_mode.clone(),
            format_f64(self.h_norm),
            format_f64(self.max_eigen_angle),
            format_f64(self.mean_iou),
            format_f64(self.min_var_captured),
            format_f64(self.bias_floor_ref),
            self.seed.to_string(),
        ]
    }
}

pub fn results_to_string(rows: &[ResultRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let csv_err = |e: csv::Error| HolonomyError::Malformed(e.to_string());
    w.write_record(RESULT_HEADER).map_err(csv_err)?;
    for r in rows {
        w.write_record(r.record()).map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| HolonomyError::Malformed(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| HolonomyError::Malformed(e.to_string()))
}

pub fn results_from_str(text: &str) -> Result<Vec<ResultRow>> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    let header = r.headers().map_err(|e| HolonomyError::Malformed(e.to_string()))?;
    if header.iter().ne(RESULT_HEADER.iter().copied()) {
        return Err(HolonomyError::Malformed(format!(
            "unexpected result header: {}",
            header.iter().collect::<Vec<_>>().join(",")
        )));
    }
    r.deserialize()
        .map(|row| row.map_err(|e| HolonomyError::Malformed(e.to_string())))
        .collect()
}

pub fn write_results(path: &Path, rows: &[ResultRow]) -> Result<()> {
    write_atomic(path, results_to_string(rows)?.as_bytes())
}

pub fn read_results(path: &Path) -> Result<Vec<ResultRow>> {
    let text = String::from_utf8(read_existing(path)?).map_err(|e| HolonomyError::Malformed(e.to_string()))?;
    results_from_str(&text)
}

/// One loop description in a loop-spec file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoopRecord {
    pub id: String,
    pub kind: String,
    pub radius: f64,
    pub n_points: usize,
    pub seed: u64,
    pub center: Vec<f64>,
    /// Plane basis columns, for circle kinds.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub basis: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub shifts: Vec<[i64; 2]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoopSpecFile {
    pub schema_version: u32,
    #[serde(default)]
    pub loops: Vec<LoopRecord>,
}

pub fn write_loop_specs(path: &Path, file: &LoopSpecFile) -> Result<()> {
    let text = toml::to_string(file).map_err(|e| HolonomyError::Malformed(e.to_string()))?;
    write_atomic(path, text.as_bytes())
}

pub fn read_loop_specs(path: &Path) -> Result<LoopSpecFile> {
    let text = String::from_utf8(read_existing(path)?).map_err(|e| HolonomyError::Malformed(e.to_string()))?;
    toml::from_str(&text).map_err(|e| HolonomyError::Malformed(e.to_string()))
}

pub const IDX_IMAGE_MAGIC: u32 = 0x0000_0803;

/// Big-endian IDX `u8` image tensor, scaled to `[0, 1]`.
pub fn decode_idx_images(bytes: &[u8]) -> Result<Vec<DMatrix<f64>>> {
    if bytes.len() < 16 {
        return Err(HolonomyError::TruncatedPayload {
            expected: 16,
            found: bytes.len(),
        });
    }
    let be = |at: usize| u32::from_be_bytes(bytes[at..at + 4].try_into().expect("4 bytes"));
    if be(0) != IDX_IMAGE_MAGIC {
        return Err(HolonomyError::BadMagic {
            expected: "IDX 0x00000803",
        });
    }
    let (n, h, w) = (be(4) as usize, be(8) as usize, be(12) as usize);
    let expected = n * h * w;
    let payload = &bytes[16..];
    if payload.len() < expected {
        return Err(HolonomyError::TruncatedPayload {
            expected,
            found: payload.len(),
        });
    }
    Ok((0..n)
        .map(|i| {
            let img = &payload[i * h * w..(i + 1) * h * w];
            DMatrix::from_fn(h, w, |y, x| img[y * w + x] as f64 / 255.0)
        })
        .collect())
}

pub fn read_idx_images(path: &Path) -> Result<Vec<DMatrix<f64>>> {
    decode_idx_images(&read_existing(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::dmatrix;

    #[test]
    fn pool_round_trip_is_bit_exact() {
        let m = dmatrix![1.0, -2.5, std::f64::consts::PI; 1e-300, 0.1, -0.0];
        let back = decode_pool(&encode_pool(&m).unwrap()).unwrap();
        for (a, b) in m.iter().zip(back.iter()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn header_layout() {
        let bytes = encode_pool(&DMatrix::from_element(2, 3, 1.0)).unwrap();
        assert_eq!(&bytes[..6], b"HPOOL1");
        assert_eq!(&bytes[6..8], &[1, 0]);
        assert_eq!(&bytes[8..12], &[2, 0, 0, 0]);
        assert_eq!(&bytes[12..16], &[3, 0, 0, 0]);
        assert_eq!(bytes.len(), 16 + 48);
    }

    #[test]
    fn bad_magic_truncation_and_nan() {
        let mut bytes = encode_pool(&DMatrix::from_element(2, 3, 1.0)).unwrap();
        assert!(matches!(decode_loop(&bytes), Err(HolonomyError::BadMagic { .. })));
        assert!(matches!(
            decode_pool(&bytes[..bytes.len() - 8]),
            Err(HolonomyError::TruncatedPayload { .. })
        ));
        assert!(matches!(
            decode_pool(&bytes[..10]),
            Err(HolonomyError::TruncatedPayload { .. })
        ));
        bytes[16..24].copy_from_slice(&f64::NAN.to_le_bytes());
        assert!(matches!(
            decode_pool(&bytes),
            Err(HolonomyError::NonFiniteEntry { row: 0, col: 0 })
        ));
        let mut v2 = encode_pool(&DMatrix::from_element(1, 1, 1.0)).unwrap();
        v2[6] = 2;
        assert!(matches!(decode_pool(&v2), Err(HolonomyError::UnsupportedVersion(2))));
    }

    #[test]
    fn loop_files_store_edge_count_and_closure() {
        let m = dmatrix![1.0, 2.0; 3.0, 4.0; 1.0, 2.0];
        let bytes = encode_loop(&m).unwrap();
        assert_eq!(&bytes[8..12], &[2, 0, 0, 0]);
        assert_eq!(decode_loop(&bytes).unwrap(), m);
        let open = dmatrix![1.0, 2.0; 3.0, 4.0];
        assert!(matches!(encode_loop(&open), Err(HolonomyError::LoopNotClosed)));
        let mut tampered = bytes.clone();
        let n = tampered.len();
        tampered[n - 8..].copy_from_slice(&2.5f64.to_le_bytes());
        assert!(matches!(decode_loop(&tampered), Err(HolonomyError::LoopNotClosed)));
    }

    fn row() -> ResultRow {
        ResultRow {
            loop_id: "mlp-s0-r0.01".into(),
            kind: "pca_circle".into(),
            radius: 0.01,
            n_points: 12,
            k: 128,
            q: 64,
            group: "SO".into(),
            whitening: "zca".into(),
            neighbor_mode: "shared".into(),
            h_norm: std::f64::consts::FRAC_1_SQRT_2,
            max_eigen_angle: 0.1 + 0.2,
            mean_iou: 0.95,
            min_var_captured: 1.0 / 3.0,
            bias_floor_ref: f64::NAN,
            seed: 4,
        }
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let text = results_to_string(&[row()]).unwrap();
        assert!(text.starts_with(&RESULT_HEADER.join(",")));
        let back = results_from_str(&text).unwrap();
        assert_eq!(back.len(), 1);
        assert_eq!(back[0].h_norm.to_bits(), std::f64::consts::FRAC_1_SQRT_2.to_bits());
        assert_eq!(back[0].max_eigen_angle.to_bits(), (0.1f64 + 0.2).to_bits());
        assert!(back[0].bias_floor_ref.is_nan());
        assert_eq!(back[0].loop_id, row().loop_id);
    }

    #[test]
    fn empty_results_are_header_only() {
        let text = results_to_string(&[]).unwrap();
        assert_eq!(text, format!("{}\n", RESULT_HEADER.join(",")));
        assert!(results_from_str(&text).unwrap().is_empty());
    }

    #[test]
    fn idx_images_decode() {
        let mut bytes = vec![0, 0, 8, 3, 0, 0, 0, 2, 0, 0, 0, 2, 0, 0, 0, 3];
        bytes.extend([0u8, 255, 51, 102, 0, 0, 1, 2, 3, 4, 5, 6]);
        let imgs = decode_idx_images(&bytes).unwrap();
        assert_eq!(imgs.len(), 2);
        assert_eq!(imgs[0][(0, 1)], 1.0);
        assert_eq!(imgs[0][(1, 0)], 102.0 / 255.0);
        bytes[3] = 1;
        assert!(decode_idx_images(&bytes).is_err());
    }

    #[test]
    fn files_round_trip_on_disk() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pool.bin");
        let m = DMatrix::from_fn(4, 3, |i, j| (i * 3 + j) as f64 * 0.25);
        write_pool(&path, &m).unwrap();
        assert_eq!(read_pool(&path).unwrap(), m);
        assert!(matches!(
            read_pool(&dir.path().join("missing.bin")),
            Err(HolonomyError::InputMissing(_))
        ));
        let specs = LoopSpecFile {
            schema_version: 1,
            loops: vec![LoopRecord {
                id: "a".into(),
                kind: "pca_circle".into(),
                radius: 0.1,
                n_points: 12,
                seed: 0,
                center: vec![0.5, 1.5],
                basis: vec![vec![1.0, 0.0], vec![0.0, 1.0]],
                shifts: vec![],
            }],
        };
        let sp = dir.path().join("loops.toml");
        write_loop_specs(&sp, &specs).unwrap();
        assert_eq!(read_loop_specs(&sp).unwrap(), specs);
    }
}
