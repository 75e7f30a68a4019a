//! C ABI over the `ccmarket` clearing library.
//!
//! Cases and clearings are opaque handles created by `ccm_*` constructors and
//! released with the matching `*_free`. Every fallible call returns a
//! [`CcmStatus`]; the message of the last failure on the calling thread is
//! available through [`ccm_last_error`]. Array getters copy into caller
//! buffers and report the required length through `needed`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use ccmarket::grid::{load_case, scale_res, CaseError, GridCase};
use ccmarket::market::{clear, MarketError};
use ccmarket::output::{to_canonical_json, SCHEMA_VERSION};
use ccmarket::pricing::{price_clearing, PricedClearing};
use ccmarket::uncertainty::assemble_for_case;
use ccmarket::{BalancingPolicy, SolveOptions, SolveStatus};

/// Result code of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CcmStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    /// Case file unreadable or malformed.
    Case = 3,
    Infeasible = 4,
    /// Solver failure or any other numerical error.
    Solver = 5,
    BufferTooSmall = 6,
    Panic = 7,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CcmPolicy {
    Deterministic = 0,
    SwSb = 1,
    N2nSb = 2,
    SwAb = 3,
    N2nAb = 4,
}

impl From<CcmPolicy> for BalancingPolicy {
    fn from(p: CcmPolicy) -> Self {
        match p {
            CcmPolicy::Deterministic => BalancingPolicy::Deterministic,
            CcmPolicy::SwSb => BalancingPolicy::SwSb,
            CcmPolicy::N2nSb => BalancingPolicy::N2nSb,
            CcmPolicy::SwAb => BalancingPolicy::SwAb,
            CcmPolicy::N2nAb => BalancingPolicy::N2nAb,
        }
    }
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct CcmCaseDims {
    pub num_buses: usize,
    pub num_lines: usize,
    pub num_generators: usize,
    pub num_res: usize,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct CcmSettlement {
    pub consumer_payment: f64,
    pub res_payment: f64,
    pub res_balancing_charge: f64,
    pub gen_revenue: f64,
    pub gen_profit: f64,
    pub congestion_rent: f64,
    pub adequacy_gap: f64,
}

/// Opaque network case.
pub struct CcmCase {
    inner: GridCase,
}

/// Opaque priced clearing.
pub struct CcmClearing {
    epsilon: f64,
    inner: PricedClearing,
}

struct Failure {
    status: CcmStatus,
    message: String,
}

impl Failure {
    fn new(status: CcmStatus, message: impl Into<String>) -> Self {
        Failure { status, message: message.into() }
    }
}

impl From<CaseError> for Failure {
    fn from(e: CaseError) -> Self {
        Failure::new(CcmStatus::Case, e.to_string())
    }
}

impl From<MarketError> for Failure {
    fn from(e: MarketError) -> Self {
        let status = match e {
            MarketError::NotOptimal(SolveStatus::Infeasible) => CcmStatus::Infeasible,
            _ => CcmStatus::Solver,
        };
        Failure::new(status, e.to_string())
    }
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: &str) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg.to_owned());
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> CcmStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            CcmStatus::Ok
        }
        Ok(Err(fail)) => {
            set_error(&fail.message);
            fail.status
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(&format!("panic: {msg}"));
            CcmStatus::Panic
        }
    }
}

unsafe fn deref<'a, T>(p: *const T, what: &str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or_else(|| Failure::new(CcmStatus::NullPointer, format!("{what} is null")))
}

unsafe fn out_ref<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Failure> {
    p.as_mut().ok_or_else(|| Failure::new(CcmStatus::NullPointer, format!("{what} is null")))
}

unsafe fn string_arg(p: *const c_char, what: &str) -> Result<String, Failure> {
    if p.is_null() {
        return Err(Failure::new(CcmStatus::NullPointer, format!("{what} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map(str::to_owned)
        .map_err(|_| Failure::new(CcmStatus::InvalidArgument, format!("{what} is not UTF-8")))
}

/// Copies `src` into `out[..len]`. `needed` (may be null) receives `src.len()`.
unsafe fn copy_out<T: Copy>(src: &[T], out: *mut T, len: usize, needed: *mut usize) -> Result<(), Failure> {
    if let Some(n) = needed.as_mut() {
        *n = src.len();
    }
    if len < src.len() {
        return Err(Failure::new(
            CcmStatus::BufferTooSmall,
            format!("buffer holds {len} values, {} needed", src.len()),
        ));
    }
    if !src.is_empty() {
        if out.is_null() {
            return Err(Failure::new(CcmStatus::NullPointer, "out is null"));
        }
        ptr::copy_nonoverlapping(src.as_ptr(), out, src.len());
    }
    Ok(())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn ccm_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Copies the last error message of this thread into `buf` (truncated and
/// NUL-terminated). Returns the full message length without the NUL.
///
/// # Safety
/// `buf` must be null or valid for `len` bytes.
#[no_mangle]
pub unsafe extern "C" fn ccm_last_error(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        if !buf.is_null() && len > 0 {
            let n = msg.len().min(len - 1);
            ptr::copy_nonoverlapping(msg.as_ptr().cast::<c_char>(), buf, n);
            *buf.add(n) = 0;
        }
        msg.len()
    })
}

/// Loads a JSON case file.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ccm_case_load(path: *const c_char, out: *mut *mut CcmCase) -> CcmStatus {
    guard(|| {
        let out = out_ref(out, "out")?;
        let path = string_arg(path, "path")?;
        let inner = load_case(Path::new(&path))?;
        *out = Box::into_raw(Box::new(CcmCase { inner }));
        Ok(())
    })
}

/// Parses a case from a JSON document.
///
/// # Safety
/// `json` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ccm_case_from_json(json: *const c_char, out: *mut *mut CcmCase) -> CcmStatus {
    guard(|| {
        let out = out_ref(out, "out")?;
        let text = string_arg(json, "json")?;
        let inner = GridCase::from_json_str(&text)?;
        *out = Box::into_raw(Box::new(CcmCase { inner }));
        Ok(())
    })
}

/// New case with every RES forecast and sigma multiplied by `factor`.
///
/// # Safety
/// `grid` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ccm_case_scale_res(grid: *const CcmCase, factor: f64, out: *mut *mut CcmCase) -> CcmStatus {
    guard(|| {
        let grid = deref(grid, "grid")?;
        let out = out_ref(out, "out")?;
        let inner = scale_res(&grid.inner, factor).map_err(|e| Failure::new(CcmStatus::InvalidArgument, e.to_string()))?;
        *out = Box::into_raw(Box::new(CcmCase { inner }));
        Ok(())
    })
}

/// # Safety
/// `grid` must be a live handle and `dims` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ccm_case_dims(grid: *const CcmCase, dims: *mut CcmCaseDims) -> CcmStatus {
    guard(|| {
        let c = &deref(grid, "grid")?.inner;
        *out_ref(dims, "dims")? = CcmCaseDims {
            num_buses: c.buses.len(),
            num_lines: c.lines.len(),
            num_generators: c.generators.len(),
            num_res: c.res_units.len(),
        };
        Ok(())
    })
}

/// Releases a case handle. Null is ignored.
///
/// # Safety
/// `grid` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn ccm_case_free(grid: *mut CcmCase) {
    if !grid.is_null() {
        drop(Box::from_raw(grid));
    }
}

/// Clears `grid` under `policy` at risk level `epsilon` and prices the result.
///
/// # Safety
/// `grid` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ccm_clear(
    grid: *const CcmCase,
    policy: CcmPolicy,
    epsilon: f64,
    out: *mut *mut CcmClearing,
) -> CcmStatus {
    guard(|| {
        let case = &deref(grid, "grid")?.inner;
        let out = out_ref(out, "out")?;
        let policy = BalancingPolicy::from(policy);
        let unc = assemble_for_case(policy, case, None)
            .and_then(|u| u.with_epsilon(epsilon))
            .map_err(|e| Failure::new(CcmStatus::InvalidArgument, e.to_string()))?;
        let c = clear(policy, case, &unc, &SolveOptions::default())?;
        let inner = price_clearing(case, &unc, c).map_err(|e| Failure::new(CcmStatus::Solver, e.to_string()))?;
        *out = Box::into_raw(Box::new(CcmClearing { epsilon, inner }));
        Ok(())
    })
}

/// Releases a clearing. Null is ignored.
///
/// # Safety
/// `clearing` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn ccm_clearing_free(clearing: *mut CcmClearing) {
    if !clearing.is_null() {
        drop(Box::from_raw(clearing));
    }
}

/// # Safety
/// `clearing` must be a live handle and `value` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ccm_clearing_objective(clearing: *const CcmClearing, value: *mut f64) -> CcmStatus {
    guard(|| {
        let h = deref(clearing, "clearing")?;
        *out_ref(value, "value")? = h.inner.clearing.solution.objective;
        Ok(())
    })
}

/// Scheduled output per generator, in case order.
///
/// # Safety
/// `clearing` must be a live handle, `out` valid for `len` values and
/// `needed` null or valid.
#[no_mangle]
pub unsafe extern "C" fn ccm_clearing_dispatch(
    clearing: *const CcmClearing,
    out: *mut f64,
    len: usize,
    needed: *mut usize,
) -> CcmStatus {
    guard(|| copy_out(&deref(clearing, "clearing")?.inner.clearing.dispatch.p, out, len, needed))
}

/// Energy price per bus, in case order.
///
/// # Safety
/// As for [`ccm_clearing_dispatch`].
#[no_mangle]
pub unsafe extern "C" fn ccm_clearing_lambda(
    clearing: *const CcmClearing,
    out: *mut f64,
    len: usize,
    needed: *mut usize,
) -> CcmStatus {
    guard(|| {
        let h = deref(clearing, "clearing")?;
        let lambda: Vec<f64> = h.inner.prices.lambda.iter().map(|l| l.unwrap_or(f64::NAN)).collect();
        copy_out(&lambda, out, len, needed)
    })
}

/// Balancing reserve price per column: one value for SW-SB, `[χ⁻, χ⁺]` for
/// SW-AB, one per RES unit for N2N-SB, downward then upward per RES unit for
/// N2N-AB, none for the deterministic clearing.
///
/// # Safety
/// As for [`ccm_clearing_dispatch`].
#[no_mangle]
pub unsafe extern "C" fn ccm_clearing_chi(
    clearing: *const CcmClearing,
    out: *mut f64,
    len: usize,
    needed: *mut usize,
) -> CcmStatus {
    guard(|| copy_out(&deref(clearing, "clearing")?.inner.prices.chi, out, len, needed))
}

/// Participation factors, row-major with one row per generator and one
/// column per balancing column.
///
/// # Safety
/// As for [`ccm_clearing_dispatch`].
#[no_mangle]
pub unsafe extern "C" fn ccm_clearing_alpha(
    clearing: *const CcmClearing,
    out: *mut f64,
    len: usize,
    needed: *mut usize,
) -> CcmStatus {
    guard(|| {
        let flat: Vec<f64> = deref(clearing, "clearing")?.inner.clearing.dispatch.alpha.concat();
        copy_out(&flat, out, len, needed)
    })
}

/// # Safety
/// `clearing` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ccm_clearing_settlement(clearing: *const CcmClearing, out: *mut CcmSettlement) -> CcmStatus {
    guard(|| {
        let s = &deref(clearing, "clearing")?.inner.settlement;
        *out_ref(out, "out")? = CcmSettlement {
            consumer_payment: s.consumer_payment,
            res_payment: s.res_payment,
            res_balancing_charge: s.res_balancing_charge,
            gen_revenue: s.gen_revenue.iter().sum(),
            gen_profit: s.gen_profit.iter().sum(),
            congestion_rent: s.congestion_rent,
            adequacy_gap: s.adequacy_gap,
        };
        Ok(())
    })
}

#[derive(serde::Serialize)]
struct ClearingDoc<'a> {
    version: u32,
    policy: BalancingPolicy,
    epsilon: f64,
    objective: f64,
    dispatch: &'a ccmarket::market::DispatchResult,
    prices: &'a ccmarket::pricing::PriceSet,
    settlement: &'a ccmarket::pricing::Settlement,
}

/// Canonical JSON of the clearing, NUL-terminated. `needed` receives the
/// byte count including the NUL.
///
/// # Safety
/// `clearing` must be a live handle, `buf` valid for `len` bytes and
/// `needed` null or valid.
#[no_mangle]
pub unsafe extern "C" fn ccm_clearing_to_json(
    clearing: *const CcmClearing,
    buf: *mut c_char,
    len: usize,
    needed: *mut usize,
) -> CcmStatus {
    guard(|| {
        let h = deref(clearing, "clearing")?;
        let doc = ClearingDoc {
            version: SCHEMA_VERSION,
            policy: h.inner.clearing.dispatch.policy,
            epsilon: h.epsilon,
            objective: h.inner.clearing.solution.objective,
            dispatch: &h.inner.clearing.dispatch,
            prices: &h.inner.prices,
            settlement: &h.inner.settlement,
        };
        let text = to_canonical_json(&doc).map_err(|e| Failure::new(CcmStatus::Solver, e.to_string()))?;
        let mut bytes = text.into_bytes();
        bytes.push(0);
        copy_out(&bytes, buf.cast::<u8>(), len, needed)
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn null_arguments_are_reported() {
        let mut out = ptr::null_mut();
        let st = unsafe { ccm_case_load(ptr::null(), &mut out) };
        assert_eq!(st, CcmStatus::NullPointer);
        let mut buf = [0 as c_char; 64];
        let n = unsafe { ccm_last_error(buf.as_mut_ptr(), buf.len()) };
        let msg = unsafe { CStr::from_ptr(buf.as_ptr()) }.to_str().unwrap();
        assert_eq!(msg, "path is null");
        assert_eq!(n, msg.len());
    }

    #[test]
    fn last_error_truncates() {
        set_error("abcdef");
        let mut buf = [1 as c_char; 4];
        assert_eq!(unsafe { ccm_last_error(buf.as_mut_ptr(), buf.len()) }, 6);
        assert_eq!(unsafe { CStr::from_ptr(buf.as_ptr()) }.to_str().unwrap(), "abc");
    }

    #[test]
    fn panics_become_status() {
        let st = guard(|| panic!("boom"));
        assert_eq!(st, CcmStatus::Panic);
        let mut buf = [0 as c_char; 32];
        unsafe { ccm_last_error(buf.as_mut_ptr(), buf.len()) };
        assert_eq!(unsafe { CStr::from_ptr(buf.as_ptr()) }.to_str().unwrap(), "panic: boom");
    }

    #[test]
    fn copy_out_reports_length() {
        let src = [1.0, 2.0, 3.0];
        let mut dst = [0.0; 2];
        let mut need = 0;
        let r = unsafe { copy_out(&src, dst.as_mut_ptr(), dst.len(), &mut need) };
        assert_eq!(r.err().map(|f| f.status), Some(CcmStatus::BufferTooSmall));
        assert_eq!(need, 3);
        let mut dst = [0.0; 3];
        unsafe { copy_out(&src, dst.as_mut_ptr(), 3, ptr::null_mut()) }.ok().unwrap();
        assert_eq!(dst, src);
    }

    #[test]
    fn free_ignores_null() {
        unsafe {
            ccm_case_free(ptr::null_mut());
            ccm_clearing_free(ptr::null_mut());
        }
    }
}
