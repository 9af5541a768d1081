//! C ABI over `pmformer-core`.
//!
//! Objects cross the boundary as opaque handles that the caller releases with
//! the matching `*_free` function. Every fallible call returns a [`PmStatus`];
//! on failure the message is available from [`pm_last_error`] on the same
//! thread until the next failing call.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use pmformer_core::autograd::Checkpoint;
use pmformer_core::backtest::build_report;
use pmformer_core::indicators::FeatureMatrix;
use pmformer_core::pipeline::{load_features, Fitted};
use pmformer_core::{Error, ErrorClass};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PmStatus {
    Ok = 0,
    NullPointer = 1,
    /// Bad argument or configuration.
    Usage = 2,
    /// Malformed, missing or insufficient data.
    Data = 3,
    /// Singular fit, divergence or an undefined statistic.
    Numeric = 4,
    /// A Rust panic was caught at the boundary.
    Internal = 5,
}

/// A feature matrix (rows x channels, row-major).
pub struct PmFeatures(FeatureMatrix);

/// A trained PMformer or DLinear model loaded from a checkpoint.
pub struct PmModel(Fitted);

/// Backtest metrics; percentages are in percent units and `sharpe` is NaN
/// when undefined.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct PmBacktestReport {
    pub mse: f64,
    pub rmse: f64,
    pub mae: f64,
    pub total_roi_pct: f64,
    pub sharpe: f64,
    pub max_drawdown_pct: f64,
    pub directional_accuracy_pct: f64,
    pub n_days: usize,
    pub n_trades: usize,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> PmStatus {
    match e.class() {
        ErrorClass::Usage => PmStatus::Usage,
        ErrorClass::Data => PmStatus::Data,
        ErrorClass::Numeric => PmStatus::Numeric,
    }
}

/// Runs `f`, converting errors and panics into a status plus a stored message.
fn guard<F: FnOnce() -> Result<(), (PmStatus, String)>>(f: F) -> PmStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => PmStatus::Ok,
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            PmStatus::Internal
        }
    }
}

fn core<T>(r: pmformer_core::Result<T>) -> Result<T, (PmStatus, String)> {
    r.map_err(|e| (status_of(&e), e.to_string()))
}

fn null(what: &str) -> (PmStatus, String) {
    (PmStatus::NullPointer, format!("{what} is null"))
}

unsafe fn path_arg(p: *const c_char) -> Result<PathBuf, (PmStatus, String)> {
    if p.is_null() {
        return Err(null("path"));
    }
    let s = CStr::from_ptr(p)
        .to_str()
        .map_err(|_| (PmStatus::Usage, "path is not valid UTF-8".to_string()))?;
    Ok(PathBuf::from(s))
}

/// Message of the last failed call on this thread, or null. The pointer stays
/// valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn pm_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Static, NUL-terminated library version.
#[no_mangle]
pub extern "C" fn pm_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Loads a feature CSV, or builds the 16-channel matrix from a klines CSV.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn pm_features_load(path: *const c_char, out: *mut *mut PmFeatures) -> PmStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let m = core(load_features(&path_arg(path)?))?;
        *out = Box::into_raw(Box::new(PmFeatures(m)));
        Ok(())
    })
}

/// # Safety
/// `features` must come from [`pm_features_load`] (or be null) and is
/// invalid afterwards.
#[no_mangle]
pub unsafe extern "C" fn pm_features_free(features: *mut PmFeatures) {
    if !features.is_null() {
        drop(Box::from_raw(features));
    }
}

/// # Safety
/// `features` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn pm_features_rows(features: *const PmFeatures) -> usize {
    features.as_ref().map_or(0, |f| f.0.rows())
}

/// # Safety
/// `features` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn pm_features_cols(features: *const PmFeatures) -> usize {
    features.as_ref().map_or(0, |f| f.0.cols())
}

/// Copies the row-major values into `buf`, which must hold rows * cols values.
///
/// # Safety
/// `features` must be a live handle and `buf` valid for `len` writes.
#[no_mangle]
pub unsafe extern "C" fn pm_features_copy(features: *const PmFeatures, buf: *mut f64, len: usize) -> PmStatus {
    guard(|| {
        let f = features.as_ref().ok_or_else(|| null("features"))?;
        if buf.is_null() {
            return Err(null("buf"));
        }
        let values = &f.0.values;
        if len != values.len() {
            return Err((PmStatus::Usage, format!("buffer holds {len} values, matrix has {}", values.len())));
        }
        ptr::copy_nonoverlapping(values.as_ptr(), buf, len);
        Ok(())
    })
}

/// Loads a PMformer or DLinear checkpoint.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn pm_model_load(path: *const c_char, out: *mut *mut PmModel) -> PmStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let ck = core(Checkpoint::load(path_arg(path)?))?;
        let fitted = core(Fitted::from_checkpoint(&ck))?;
        *out = Box::into_raw(Box::new(PmModel(fitted)));
        Ok(())
    })
}

/// # Safety
/// `model` must come from [`pm_model_load`] (or be null) and is invalid
/// afterwards.
#[no_mangle]
pub unsafe extern "C" fn pm_model_free(model: *mut PmModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

fn dims(m: &Fitted) -> (usize, usize) {
    match m {
        Fitted::Pmformer(p) => (p.config().window, p.config().num_features),
        Fitted::Dlinear(d) => (d.config().window, d.config().channels),
        Fitted::Naive | Fitted::Ar(_) => (0, 0),
    }
}

/// Input window length `SL`, or 0 for a null handle.
///
/// # Safety
/// `model` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn pm_model_window(model: *const PmModel) -> usize {
    model.as_ref().map_or(0, |m| dims(&m.0).0)
}

/// Number of input channels, or 0 for a null handle.
///
/// # Safety
/// `model` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn pm_model_channels(model: *const PmModel) -> usize {
    model.as_ref().map_or(0, |m| dims(&m.0).1)
}

/// Scaled next-step target prediction for one scaled `SL x channels`
/// row-major window. PMformer averages `ensemble` target subsets drawn from
/// `seed`; DLinear ignores both.
///
/// # Safety
/// `model` must be a live handle, `window` valid for `len` reads and `out`
/// a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn pm_model_predict(
    model: *const PmModel,
    window: *const f64,
    len: usize,
    ensemble: usize,
    seed: u64,
    out: *mut f64,
) -> PmStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        if window.is_null() {
            return Err(null("window"));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        let (sl, c) = dims(&m.0);
        if len != sl * c {
            return Err((PmStatus::Usage, format!("window has {len} values, expected {sl} x {c}")));
        }
        let w = std::slice::from_raw_parts(window, len);
        let y = match &m.0 {
            Fitted::Pmformer(p) => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                core(p.predict_target(w, ensemble, &mut rng))?
            }
            Fitted::Dlinear(d) => core(d.predict(w))?[d.config().target_channel],
            Fitted::Naive | Fitted::Ar(_) => unreachable!("only checkpoint models are loadable"),
        };
        *out = y;
        Ok(())
    })
}

/// Sign-rule backtest of `n` predicted against actual log returns.
///
/// # Safety
/// `preds` and `actuals` must be valid for `n` reads and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn pm_backtest(
    preds: *const f64,
    actuals: *const f64,
    n: usize,
    cost_per_side: f64,
    out: *mut PmBacktestReport,
) -> PmStatus {
    guard(|| {
        if preds.is_null() || actuals.is_null() || out.is_null() {
            return Err(null("preds, actuals or out"));
        }
        if n == 0 {
            return Err((PmStatus::Data, "no predictions".into()));
        }
        let p = std::slice::from_raw_parts(preds, n);
        let a = std::slice::from_raw_parts(actuals, n);
        let (r, _) = core(build_report("ffi", "", p, a, cost_per_side))?;
        *out = PmBacktestReport {
            mse: r.mse,
            rmse: r.rmse,
            mae: r.mae,
            total_roi_pct: r.total_roi_pct,
            sharpe: r.sharpe,
            max_drawdown_pct: r.max_drawdown_pct,
            directional_accuracy_pct: r.directional_accuracy_pct,
            n_days: r.n_days,
            n_trades: r.n_trades,
        };
        Ok(())
    })
}
