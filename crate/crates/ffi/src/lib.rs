//! C ABI over the holonomy estimator.
//!
//! All objects are opaque handles created and destroyed through this API.
//! Every fallible call returns a [`HolStatus`]; on failure a message is kept
//! per thread and can be read with [`hol_last_error`]. Matrices cross the
//! boundary as row-major `double` buffers.

use std::cell::RefCell;
use std::ffi::{c_char, c_void, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use nalgebra::{DMatrix, DVector};
use rep_holonomy::config::{CloudMode, EstimatorConfig, Group, NeighborMode, WhiteningMode};
use rep_holonomy::gauge::FeaturePool;
use rep_holonomy::holonomy::{self, HolonomyEstimator, HolonomyResult};
use rep_holonomy::io;
use rep_holonomy::loops::InputLoop;
use rep_holonomy::models::Featurizer;
use rep_holonomy::HolonomyError;

/// Status codes returned by every fallible function.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HolStatus {
    Ok = 0,
    NullPointer = 1,
    DimensionMismatch = 2,
    InvalidArgument = 3,
    Numerical = 4,
    LoopNotClosed = 5,
    MissingPoolInputs = 6,
    Io = 7,
    Format = 8,
    Callback = 9,
    Panic = 10,
}

pub const HOL_GROUP_SO: u32 = 0;
pub const HOL_GROUP_O: u32 = 1;
pub const HOL_WHITEN_ZCA: u32 = 0;
pub const HOL_WHITEN_ZSCORE: u32 = 1;
pub const HOL_WHITEN_LOCAL: u32 = 2;
pub const HOL_NEIGHBORS_SHARED: u32 = 0;
pub const HOL_NEIGHBORS_SEPARATE: u32 = 1;
pub const HOL_CENTERING_MIDPOINT_SHARED: u32 = 0;
pub const HOL_CENTERING_ENDPOINT_PAIR: u32 = 1;
pub const HOL_CENTERING_ROW_TRANSPORT: u32 = 2;

/// Estimator settings; obtain defaults with [`hol_default_config`].
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HolConfig {
    pub k: usize,
    pub q: usize,
    /// `HOL_GROUP_*`.
    pub group: u32,
    /// `HOL_WHITEN_*`.
    pub whitening: u32,
    /// `HOL_NEIGHBORS_*`.
    pub neighbor_mode: u32,
    /// `HOL_CENTERING_*`.
    pub centering: u32,
    pub eigen_floor: f64,
}

/// Opaque feature pool.
pub struct HolPool {
    pool: FeaturePool,
}

/// Opaque estimate.
pub struct HolResult {
    result: HolonomyResult,
}

/// Feature callback: write `p` features of the `d`-dimensional input `x`
/// into `out` and return 0, or nonzero on failure. It is only ever called
/// from the thread that called into the library.
pub type HolFeatureFn =
    Option<unsafe extern "C" fn(user_data: *mut c_void, x: *const f64, d: usize, out: *mut f64, p: usize) -> i32>;

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let clean = msg.replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(clean).expect("no interior nul"));
}

fn status_of(e: &HolonomyError) -> HolStatus {
    use HolonomyError::*;
    match e {
        DimensionMismatch { .. } | InvalidDimension(_) => HolStatus::DimensionMismatch,
        InvalidArgument(_) | KTooLarge { .. } | ConfigInvalid(_) | UnknownCommand(_) => HolStatus::InvalidArgument,
        ZeroVariance | DegenerateCloud | NotOrthogonal(_) | DegenerateInput(_) => HolStatus::Numerical,
        LoopNotClosed | NotClosed => HolStatus::LoopNotClosed,
        MissingPoolInputs => HolStatus::MissingPoolInputs,
        Io(_) | InputMissing(_) => HolStatus::Io,
        BadMagic { .. } | UnsupportedVersion(_) | TruncatedPayload { .. } | NonFiniteEntry { .. } | Malformed(_) => {
            HolStatus::Format
        }
    }
}

/// Run `body`, converting errors and panics into status codes.
fn guard<F>(body: F) -> HolStatus
where
    F: FnOnce() -> Result<(), (HolStatus, String)>,
{
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(Ok(())) => {
            set_error("");
            HolStatus::Ok
        }
        Ok(Err((status, msg))) => {
            set_error(&msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            HolStatus::Panic
        }
    }
}

fn lib_err(e: HolonomyError) -> (HolStatus, String) {
    (status_of(&e), e.to_string())
}

fn null(what: &str) -> (HolStatus, String) {
    (HolStatus::NullPointer, format!("{what} is null"))
}

fn bad(msg: String) -> (HolStatus, String) {
    (HolStatus::InvalidArgument, msg)
}

/// Copy a row-major `rows × cols` buffer into a matrix.
///
/// # Safety
/// `data` must point to `rows * cols` readable doubles.
unsafe fn matrix_from(
    data: *const f64,
    rows: usize,
    cols: usize,
    what: &str,
) -> Result<DMatrix<f64>, (HolStatus, String)> {
    if data.is_null() {
        return Err(null(what));
    }
    let len = rows
        .checked_mul(cols)
        .ok_or_else(|| bad(format!("{what}: size overflow")))?;
    let slice = std::slice::from_raw_parts(data, len);
    Ok(DMatrix::from_row_slice(rows, cols, slice))
}

fn to_estimator_config(c: &HolConfig) -> Result<EstimatorConfig, (HolStatus, String)> {
    let group = match c.group {
        HOL_GROUP_SO => Group::SpecialOrthogonal,
        HOL_GROUP_O => Group::Orthogonal,
        g => return Err(bad(format!("unknown group {g}"))),
    };
    let whitening = match c.whitening {
        HOL_WHITEN_ZCA => WhiteningMode::Zca,
        HOL_WHITEN_ZSCORE => WhiteningMode::Zscore,
        HOL_WHITEN_LOCAL => WhiteningMode::Local,
        w => return Err(bad(format!("unknown whitening {w}"))),
    };
    let neighbor_mode = match c.neighbor_mode {
        HOL_NEIGHBORS_SHARED => NeighborMode::Shared,
        HOL_NEIGHBORS_SEPARATE => NeighborMode::Separate,
        n => return Err(bad(format!("unknown neighbor mode {n}"))),
    };
    let centering = match c.centering {
        HOL_CENTERING_MIDPOINT_SHARED => CloudMode::MidpointShared,
        HOL_CENTERING_ENDPOINT_PAIR => CloudMode::EndpointPair,
        HOL_CENTERING_ROW_TRANSPORT => CloudMode::RowTransport,
        m => return Err(bad(format!("unknown centering {m}"))),
    };
    if c.q > c.k {
        return Err(bad(format!("q = {} exceeds k = {}", c.q, c.k)));
    }
    if !(c.eigen_floor > 0.0 && c.eigen_floor < 1.0) {
        return Err(bad(format!("eigen_floor {} not in (0, 1)", c.eigen_floor)));
    }
    Ok(EstimatorConfig {
        k: c.k,
        q: c.q,
        group,
        whitening,
        neighbor_mode,
        centering,
        eigen_floor: c.eigen_floor,
        ..EstimatorConfig::default()
    })
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn hol_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failed call on this thread (empty after success).
/// Valid until the next library call on the same thread.
#[no_mangle]
pub extern "C" fn hol_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Fill `out` with the default settings (k = 128, q = 64, SO, ZCA, shared
/// neighbors, row-transport clouds).
///
/// # Safety
/// `out` must be a valid pointer to a `HolConfig`.
#[no_mangle]
pub unsafe extern "C" fn hol_default_config(out: *mut HolConfig) -> HolStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let d = EstimatorConfig::default();
        *out = HolConfig {
            k: d.k,
            q: d.q,
            group: HOL_GROUP_SO,
            whitening: HOL_WHITEN_ZCA,
            neighbor_mode: HOL_NEIGHBORS_SHARED,
            centering: HOL_CENTERING_ROW_TRANSPORT,
            eigen_floor: d.eigen_floor,
        };
        Ok(())
    })
}

/// Build a pool from `n × p` row-major raw features.
///
/// # Safety
/// `data` must point to `n * p` doubles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn hol_pool_new(data: *const f64, n: usize, p: usize, out: *mut *mut HolPool) -> HolStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let m = matrix_from(data, n, p, "data")?;
        let pool = FeaturePool::new(m).map_err(lib_err)?;
        *out = Box::into_raw(Box::new(HolPool { pool }));
        Ok(())
    })
}

/// Read an HPOOL1 file.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn hol_pool_read(path: *const c_char, out: *mut *mut HolPool) -> HolStatus {
    guard(|| {
        if path.is_null() {
            return Err(null("path"));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        let path = CStr::from_ptr(path)
            .to_str()
            .map_err(|e| bad(format!("path is not UTF-8: {e}")))?;
        let m = io::read_pool(std::path::Path::new(path)).map_err(lib_err)?;
        let pool = FeaturePool::new(m).map_err(lib_err)?;
        *out = Box::into_raw(Box::new(HolPool { pool }));
        Ok(())
    })
}

/// Attach the `n × d` inputs that produced the pool rows (needed for
/// row-transport clouds).
///
/// # Safety
/// `pool` must come from this library; `inputs` must hold `n * d` doubles.
#[no_mangle]
pub unsafe extern "C" fn hol_pool_set_inputs(pool: *mut HolPool, inputs: *const f64, n: usize, d: usize) -> HolStatus {
    guard(|| {
        let handle = pool.as_mut().ok_or_else(|| null("pool"))?;
        let m = matrix_from(inputs, n, d, "inputs")?;
        handle.pool = handle.pool.clone().with_inputs(m).map_err(lib_err)?;
        Ok(())
    })
}

/// Pool size and feature dimension.
///
/// # Safety
/// `pool` must come from this library; `n` and `p` must be writable.
#[no_mangle]
pub unsafe extern "C" fn hol_pool_shape(pool: *const HolPool, n: *mut usize, p: *mut usize) -> HolStatus {
    guard(|| {
        let handle = pool.as_ref().ok_or_else(|| null("pool"))?;
        if n.is_null() || p.is_null() {
            return Err(null("shape output"));
        }
        *n = handle.pool.n_pool();
        *p = handle.pool.dim();
        Ok(())
    })
}

/// # Safety
/// `pool` must come from this library (or be null) and not be used again.
#[no_mangle]
pub unsafe extern "C" fn hol_pool_free(pool: *mut HolPool) {
    if !pool.is_null() {
        drop(Box::from_raw(pool));
    }
}

fn finish(out: *mut *mut HolResult, result: HolonomyResult) {
    // SAFETY: callers check `out` before computing.
    unsafe { *out = Box::into_raw(Box::new(HolResult { result })) };
}

/// Estimate from precomputed raw loop features: `rows = L + 1` rows of
/// dimension `p`, with the last row equal to the first. Requires
/// midpoint-shared or endpoint-pair centering.
///
/// # Safety
/// `pool` and `config` must be valid; `features` must hold `rows * p`
/// doubles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn hol_estimate_features(
    pool: *const HolPool,
    config: *const HolConfig,
    features: *const f64,
    rows: usize,
    p: usize,
    out: *mut *mut HolResult,
) -> HolStatus {
    guard(|| {
        let handle = pool.as_ref().ok_or_else(|| null("pool"))?;
        let cfg = to_estimator_config(config.as_ref().ok_or_else(|| null("config"))?)?;
        if out.is_null() {
            return Err(null("out"));
        }
        let feats = matrix_from(features, rows, p, "features")?;
        let est = HolonomyEstimator::new(&handle.pool, None, cfg).map_err(lib_err)?;
        finish(out, est.estimate_features(&feats, "ffi").map_err(lib_err)?);
        Ok(())
    })
}

struct CallbackMap {
    func: unsafe extern "C" fn(*mut c_void, *const f64, usize, *mut f64, usize) -> i32,
    user_data: *mut c_void,
    input_dim: usize,
    output_dim: usize,
}

// SAFETY: the estimator built around a CallbackMap runs sequentially and
// eval_rows below is sequential, so the callback only runs on the calling
// thread; the trait bound is needed only to share the map by reference.
unsafe impl Sync for CallbackMap {}

impl Featurizer for CallbackMap {
    fn input_dim(&self) -> usize {
        self.input_dim
    }

    fn output_dim(&self) -> usize {
        self.output_dim
    }

    fn eval(&self, x: &DVector<f64>) -> rep_holonomy::Result<DVector<f64>> {
        let mut out = DVector::zeros(self.output_dim);
        // SAFETY: buffers have the advertised lengths; the callback contract
        // is documented on HolFeatureFn.
        let code = unsafe { (self.func)(self.user_data, x.as_ptr(), x.len(), out.as_mut_ptr(), self.output_dim) };
        if code != 0 {
            return Err(HolonomyError::DegenerateInput(format!(
                "feature callback returned {code}"
            )));
        }
        Ok(out)
    }

    fn eval_rows(&self, xs: &DMatrix<f64>) -> rep_holonomy::Result<DMatrix<f64>> {
        let mut out = DMatrix::zeros(xs.nrows(), self.output_dim);
        for i in 0..xs.nrows() {
            let z = self.eval(&xs.row(i).transpose())?;
            out.row_mut(i).copy_from(&z.transpose());
        }
        Ok(out)
    }
}

/// Estimate along an input-space loop (`n_points = L + 1` rows of dimension
/// `d`, last equal to first) with features supplied by `callback`.
///
/// # Safety
/// `pool` and `config` must be valid; `points` must hold `n_points * d`
/// doubles; `callback` must satisfy the [`HolFeatureFn`] contract.
#[no_mangle]
pub unsafe extern "C" fn hol_estimate_callback(
    pool: *const HolPool,
    config: *const HolConfig,
    callback: HolFeatureFn,
    user_data: *mut c_void,
    points: *const f64,
    n_points: usize,
    d: usize,
    out: *mut *mut HolResult,
) -> HolStatus {
    let status = guard(|| {
        let handle = pool.as_ref().ok_or_else(|| null("pool"))?;
        let cfg = to_estimator_config(config.as_ref().ok_or_else(|| null("config"))?)?;
        let func = callback.ok_or_else(|| null("callback"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        let pts = matrix_from(points, n_points, d, "points")?;
        let lp = InputLoop::from_points((0..n_points).map(|i| pts.row(i).transpose()).collect()).map_err(lib_err)?;
        let map = CallbackMap {
            func,
            user_data,
            input_dim: d,
            output_dim: handle.pool.dim(),
        };
        let est = HolonomyEstimator::new(&handle.pool, Some(&map), cfg)
            .map_err(lib_err)?
            .sequential();
        finish(out, est.estimate(&lp, "ffi").map_err(lib_err)?);
        Ok(())
    });
    let callback_failed = status == HolStatus::Numerical
        && LAST_ERROR.with(|e| e.borrow().to_string_lossy().contains("feature callback"));
    if callback_failed {
        HolStatus::Callback
    } else {
        status
    }
}

/// # Safety
/// `result` must come from this library; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn hol_result_h_norm(result: *const HolResult, out: *mut f64) -> HolStatus {
    guard(|| {
        let r = result.as_ref().ok_or_else(|| null("result"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        *out = r.result.h_norm;
        Ok(())
    })
}

/// Feature dimension `p` of the holonomy matrix.
///
/// # Safety
/// `result` must come from this library; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn hol_result_dim(result: *const HolResult, out: *mut usize) -> HolStatus {
    guard(|| {
        let r = result.as_ref().ok_or_else(|| null("result"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        *out = r.result.h.nrows();
        Ok(())
    })
}

/// Number of loop edges.
///
/// # Safety
/// `result` must come from this library; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn hol_result_n_edges(result: *const HolResult, out: *mut usize) -> HolStatus {
    guard(|| {
        let r = result.as_ref().ok_or_else(|| null("result"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        *out = r.result.edges.len();
        Ok(())
    })
}

/// Copy `H` row-major into `out` (`len` must be at least `p * p`).
///
/// # Safety
/// `result` must come from this library; `out` must hold `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn hol_result_matrix(result: *const HolResult, out: *mut f64, len: usize) -> HolStatus {
    guard(|| {
        let r = result.as_ref().ok_or_else(|| null("result"))?;
        let h = &r.result.h;
        let p = h.nrows();
        if out.is_null() {
            return Err(null("out"));
        }
        if len < p * p {
            return Err((
                HolStatus::DimensionMismatch,
                format!("buffer holds {len}, need {}", p * p),
            ));
        }
        let dst = std::slice::from_raw_parts_mut(out, p * p);
        for i in 0..p {
            for j in 0..p {
                dst[i * p + j] = h[(i, j)];
            }
        }
        Ok(())
    })
}

/// Copy the `p` eigen-angles (sorted by magnitude, descending) into `out`.
///
/// # Safety
/// `result` must come from this library; `out` must hold `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn hol_result_eigen_angles(result: *const HolResult, out: *mut f64, len: usize) -> HolStatus {
    guard(|| {
        let r = result.as_ref().ok_or_else(|| null("result"))?;
        let a = &r.result.eigen_angles;
        if out.is_null() {
            return Err(null("out"));
        }
        if len < a.len() {
            return Err((
                HolStatus::DimensionMismatch,
                format!("buffer holds {len}, need {}", a.len()),
            ));
        }
        ptr::copy_nonoverlapping(a.as_ptr(), out, a.len());
        Ok(())
    })
}

/// # Safety
/// `result` must come from this library (or be null) and not be used again.
#[no_mangle]
pub unsafe extern "C" fn hol_result_free(result: *mut HolResult) {
    if !result.is_null() {
        drop(Box::from_raw(result));
    }
}

/// `‖H − I‖_F / (2√p)` of a row-major `p × p` matrix.
///
/// # Safety
/// `h` must hold `p * p` doubles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn hol_h_norm(h: *const f64, p: usize, out: *mut f64) -> HolStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        if p == 0 {
            return Err(bad("p must be positive".into()));
        }
        *out = holonomy::h_norm(&matrix_from(h, p, p, "h")?);
        Ok(())
    })
}
