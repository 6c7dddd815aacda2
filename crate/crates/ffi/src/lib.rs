//! C interface to `opm-core`.
//!
//! Instances and outcomes are opaque heap handles released with their
//! `*_free` function. Every fallible call returns an [`OpmStatus`]; on
//! failure the calling thread's [`opm_last_error_message`] describes it.
//! Rationals such as `alpha` are passed as strings (`"1/80"`, `"0.0125"`).

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use opm_core::canonical::tau;
use opm_core::engine::MechanismConfig;
use opm_core::io::format::{parse_instance, to_canonical_json};
use opm_core::io::report::{build_run_report, RunReport};
use opm_core::market::{validate_instance, Instance};
use opm_core::rational::parse_ratio;

/// Result of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OpmStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidUtf8 = 2,
    ParseError = 3,
    InvalidArgument = 4,
    EngineError = 5,
    Panic = 6,
}

/// A parsed market.
pub struct OpmInstance {
    inner: Instance,
}

/// The report of one mechanism run.
pub struct OpmOutcome {
    report: RunReport,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(message: impl Into<String>) {
    let text = CString::new(message.into().replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|slot| *slot.borrow_mut() = text);
}

type Failure = (OpmStatus, String);

fn guard(body: impl FnOnce() -> Result<(), Failure>) -> OpmStatus {
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(Ok(())) => {
            set_error("");
            OpmStatus::Ok
        }
        Ok(Err((status, message))) => {
            set_error(message);
            status
        }
        Err(_) => {
            set_error("internal panic");
            OpmStatus::Panic
        }
    }
}

unsafe fn text<'a>(p: *const c_char, name: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err((OpmStatus::NullArgument, format!("{name} is null")));
    }
    CStr::from_ptr(p).to_str().map_err(|_| (OpmStatus::InvalidUtf8, format!("{name} is not valid UTF-8")))
}

unsafe fn handle<'a, T>(p: *const T, name: &str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or_else(|| (OpmStatus::NullArgument, format!("{name} is null")))
}

unsafe fn out<'a, T>(p: *mut T, name: &str) -> Result<&'a mut T, Failure> {
    p.as_mut().ok_or_else(|| (OpmStatus::NullArgument, format!("{name} is null")))
}

fn ratio(text: &str) -> Result<opm_core::rational::Ratio, Failure> {
    parse_ratio(text).map_err(|e| (OpmStatus::InvalidArgument, e.to_string()))
}

/// Message for the last failed call on this thread; empty after a success.
/// The pointer stays valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn opm_last_error_message() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ptr())
}

/// Parses an instance document into `*out`.
///
/// # Safety
/// `json` must be a nul-terminated string and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn opm_instance_parse(json: *const c_char, out_instance: *mut *mut OpmInstance) -> OpmStatus {
    guard(|| {
        let slot = out(out_instance, "out")?;
        *slot = ptr::null_mut();
        let inner = parse_instance(text(json, "json")?).map_err(|e| (OpmStatus::ParseError, e.to_string()))?;
        *slot = Box::into_raw(Box::new(OpmInstance { inner }));
        Ok(())
    })
}

/// # Safety
/// `instance` must come from [`opm_instance_parse`] and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn opm_instance_free(instance: *mut OpmInstance) {
    if !instance.is_null() {
        drop(Box::from_raw(instance));
    }
}

/// Size of the optimal trade set.
///
/// # Safety
/// Pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn opm_instance_tau(instance: *const OpmInstance, out_tau: *mut usize) -> OpmStatus {
    guard(|| {
        let inst = handle(instance, "instance")?;
        *out(out_tau, "out")? = tau(&inst.inner);
        Ok(())
    })
}

/// Sets `*passed` to whether no entity exceeds `alpha` times the optimum.
///
/// # Safety
/// Pointers must be valid and `alpha` nul-terminated.
#[no_mangle]
pub unsafe extern "C" fn opm_instance_validate(
    instance: *const OpmInstance,
    alpha: *const c_char,
    passed: *mut bool,
) -> OpmStatus {
    guard(|| {
        let inst = handle(instance, "instance")?;
        let alpha = ratio(text(alpha, "alpha")?)?;
        let report = validate_instance(&inst.inner, &alpha).map_err(|e| (OpmStatus::InvalidArgument, e.to_string()))?;
        *out(passed, "passed")? = report.passed();
        Ok(())
    })
}

/// Runs the mechanism on truthful reports.
///
/// # Safety
/// Pointers must be valid and `alpha` nul-terminated.
#[no_mangle]
pub unsafe extern "C" fn opm_run(
    instance: *const OpmInstance,
    alpha: *const c_char,
    seed: u64,
    out_outcome: *mut *mut OpmOutcome,
) -> OpmStatus {
    guard(|| {
        let slot = out(out_outcome, "out")?;
        *slot = ptr::null_mut();
        let inst = handle(instance, "instance")?;
        let alpha = ratio(text(alpha, "alpha")?)?;
        let config = MechanismConfig::new(alpha, seed).map_err(|e| (OpmStatus::InvalidArgument, e.to_string()))?;
        let report =
            build_run_report(&inst.inner, None, &config, false).map_err(|e| (OpmStatus::EngineError, e.to_string()))?;
        *slot = Box::into_raw(Box::new(OpmOutcome { report }));
        Ok(())
    })
}

/// Gain from trade in millionths of a money unit.
///
/// # Safety
/// Pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn opm_outcome_gft_micros(outcome: *const OpmOutcome, micros: *mut i64) -> OpmStatus {
    guard(|| {
        let o = handle(outcome, "outcome")?;
        *out(micros, "out")? = o.report.summary.gft.micros();
        Ok(())
    })
}

/// # Safety
/// Pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn opm_outcome_trade_count(outcome: *const OpmOutcome, count: *mut usize) -> OpmStatus {
    guard(|| {
        let o = handle(outcome, "outcome")?;
        *out(count, "out")? = o.report.summary.trades;
        Ok(())
    })
}

/// The run report as JSON; release it with [`opm_string_free`].
///
/// # Safety
/// Pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn opm_outcome_to_json(outcome: *const OpmOutcome, json: *mut *mut c_char) -> OpmStatus {
    guard(|| {
        let slot = out(json, "out")?;
        *slot = ptr::null_mut();
        let o = handle(outcome, "outcome")?;
        let text = CString::new(to_canonical_json(&o.report)).expect("JSON has no nul bytes");
        *slot = text.into_raw();
        Ok(())
    })
}

/// # Safety
/// `outcome` must come from [`opm_run`] and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn opm_outcome_free(outcome: *mut OpmOutcome) {
    if !outcome.is_null() {
        drop(Box::from_raw(outcome));
    }
}

/// # Safety
/// `s` must come from this library and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn opm_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}
