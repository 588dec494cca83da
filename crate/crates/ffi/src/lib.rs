//! C ABI over the ompsynth parsers, answer renderers and Caliper
//! instrumentation.
//!
//! Conventions:
//! - every fallible call returns an [`OmpsStatus`]; details of the last
//!   failure on the calling thread are available from
//!   [`omps_last_error_message`];
//! - strings returned through `char**` out-parameters are owned by the
//!   caller and must be released with [`omps_string_free`];
//! - report and profile handles are opaque and released with their
//!   matching `_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use ompsynth::model::{
    parse_caliper_answer, parse_race_answer, render_caliper_answer, render_race_answer, CaliperProfile, RaceReport,
};
use ompsynth::toolchain::{
    check_marker_nesting, instrument_with_caliper, parse_tsan, region_snippets, strip_caliper_markers, RegionSpan,
};
use ompsynth::Error;

/// Result codes. 1..=5 follow the CLI exit codes.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OmpsStatus {
    Ok = 0,
    Other = 1,
    Config = 2,
    Endpoint = 3,
    Toolchain = 4,
    Format = 5,
    NullArgument = 6,
    InvalidUtf8 = 7,
    Panic = 8,
}

impl From<&Error> for OmpsStatus {
    fn from(e: &Error) -> Self {
        match e.exit_code() {
            2 => OmpsStatus::Config,
            3 => OmpsStatus::Endpoint,
            4 => OmpsStatus::Toolchain,
            5 => OmpsStatus::Format,
            _ => OmpsStatus::Other,
        }
    }
}

/// Opaque canonical race report.
pub struct OmpsRaceReport(RaceReport);

/// Opaque Caliper work-percentage profile.
pub struct OmpsCaliperProfile(CaliperProfile);

/// Inclusive 1-based line range.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct OmpsSpan {
    pub start_line: u32,
    pub end_line: u32,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let c = CString::new(msg.into().replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

struct Failure(OmpsStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure(OmpsStatus::from(&e), e.to_string())
    }
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> OmpsStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => OmpsStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("panic inside ompsynth");
            OmpsStatus::Panic
        }
    }
}

unsafe fn input<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(Failure(OmpsStatus::NullArgument, format!("{what} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure(OmpsStatus::InvalidUtf8, format!("{what} is not UTF-8")))
}

fn check_out<T>(p: *mut T, what: &str) -> Result<(), Failure> {
    if p.is_null() {
        Err(Failure(OmpsStatus::NullArgument, format!("{what} is null")))
    } else {
        Ok(())
    }
}

unsafe fn put_string(out: *mut *mut c_char, s: String) -> Result<(), Failure> {
    check_out(out, "out")?;
    let c = CString::new(s).map_err(|_| Failure(OmpsStatus::Format, "output contains a NUL byte".into()))?;
    *out = c.into_raw();
    Ok(())
}

unsafe fn spans_from(spans: *const OmpsSpan, n: usize) -> Result<Vec<RegionSpan>, Failure> {
    if n == 0 {
        return Ok(Vec::new());
    }
    if spans.is_null() {
        return Err(Failure(OmpsStatus::NullArgument, "spans is null".into()));
    }
    Ok(std::slice::from_raw_parts(spans, n)
        .iter()
        .map(|s| RegionSpan::new(s.start_line as usize, s.end_line as usize))
        .collect())
}

/// Message of the last failure on this thread, or null. Valid until the
/// next failing call on the same thread.
#[no_mangle]
pub extern "C" fn omps_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version, static storage.
#[no_mangle]
pub extern "C" fn omps_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// # Safety
/// `s` must come from this library or be null.
#[no_mangle]
pub unsafe extern "C" fn omps_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

// ---------------------------------------------------------------- races

/// Parses raw ThreadSanitizer output; locations are kept for
/// `candidate_file` only.
///
/// # Safety
/// Pointers must be valid NUL-terminated strings; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn omps_parse_tsan(
    raw_output: *const c_char,
    candidate_file: *const c_char,
    out: *mut *mut OmpsRaceReport,
) -> OmpsStatus {
    guard(|| {
        let raw = input(raw_output, "raw_output")?;
        let file = input(candidate_file, "candidate_file")?;
        check_out(out, "out")?;
        *out = Box::into_raw(Box::new(OmpsRaceReport(parse_tsan(raw, file).report)));
        Ok(())
    })
}

/// Parses a race answer (prefix line plus JSON list).
///
/// # Safety
/// As for [`omps_parse_tsan`].
#[no_mangle]
pub unsafe extern "C" fn omps_race_report_parse_answer(
    text: *const c_char,
    out: *mut *mut OmpsRaceReport,
) -> OmpsStatus {
    guard(|| {
        let text = input(text, "text")?;
        check_out(out, "out")?;
        *out = Box::into_raw(Box::new(OmpsRaceReport(parse_race_answer(text)?)));
        Ok(())
    })
}

/// # Safety
/// `report` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn omps_race_report_render(report: *const OmpsRaceReport, out: *mut *mut c_char) -> OmpsStatus {
    guard(|| {
        let r = report
            .as_ref()
            .ok_or(Failure(OmpsStatus::NullArgument, "report is null".into()))?;
        put_string(out, render_race_answer(&r.0))
    })
}

/// Canonical JSON of the report.
///
/// # Safety
/// As for [`omps_race_report_render`].
#[no_mangle]
pub unsafe extern "C" fn omps_race_report_to_json(report: *const OmpsRaceReport, out: *mut *mut c_char) -> OmpsStatus {
    guard(|| {
        let r = report
            .as_ref()
            .ok_or(Failure(OmpsStatus::NullArgument, "report is null".into()))?;
        let json = serde_json::to_string(&r.0).map_err(|e| Failure(OmpsStatus::Format, e.to_string()))?;
        put_string(out, json)
    })
}

/// Number of findings; 0 for a null handle.
///
/// # Safety
/// `report` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn omps_race_report_len(report: *const OmpsRaceReport) -> usize {
    report.as_ref().map_or(0, |r| r.0.findings.len())
}

/// # Safety
/// `report` must come from this library or be null.
#[no_mangle]
pub unsafe extern "C" fn omps_race_report_free(report: *mut OmpsRaceReport) {
    if !report.is_null() {
        drop(Box::from_raw(report));
    }
}

// ---------------------------------------------------------------- caliper

/// Parses a single-program Caliper answer.
///
/// # Safety
/// `text` must be a valid NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn omps_caliper_profile_parse_answer(
    text: *const c_char,
    out: *mut *mut OmpsCaliperProfile,
) -> OmpsStatus {
    guard(|| {
        let text = input(text, "text")?;
        check_out(out, "out")?;
        *out = Box::into_raw(Box::new(OmpsCaliperProfile(parse_caliper_answer(text)?)));
        Ok(())
    })
}

/// Renders `profile` as an answer, quoting each region's lines of `code`.
///
/// # Safety
/// `profile` must be a live handle, `code` a valid string, `spans` an array
/// of `n_spans` entries (may be null when `n_spans` is 0).
#[no_mangle]
pub unsafe extern "C" fn omps_caliper_profile_render(
    profile: *const OmpsCaliperProfile,
    code: *const c_char,
    spans: *const OmpsSpan,
    n_spans: usize,
    out: *mut *mut c_char,
) -> OmpsStatus {
    guard(|| {
        let p = profile
            .as_ref()
            .ok_or(Failure(OmpsStatus::NullArgument, "profile is null".into()))?;
        let code = input(code, "code")?;
        let spans = spans_from(spans, n_spans)?;
        put_string(out, render_caliper_answer(&p.0, &region_snippets(code, &spans)))
    })
}

/// Work % of `region` at `thread_count`; false when absent or failed.
///
/// # Safety
/// `profile` must be a live handle, `region` a valid string, `out` writable.
#[no_mangle]
pub unsafe extern "C" fn omps_caliper_profile_work(
    profile: *const OmpsCaliperProfile,
    region: *const c_char,
    thread_count: u32,
    out: *mut f64,
) -> bool {
    let Some(p) = profile.as_ref() else { return false };
    let Ok(region) = input(region, "region") else {
        return false;
    };
    if out.is_null() {
        return false;
    }
    match p.0.get(region, thread_count).and_then(|c| c.value()) {
        Some(v) => {
            *out = v;
            true
        }
        None => false,
    }
}

/// # Safety
/// `profile` must come from this library or be null.
#[no_mangle]
pub unsafe extern "C" fn omps_caliper_profile_free(profile: *mut OmpsCaliperProfile) {
    if !profile.is_null() {
        drop(Box::from_raw(profile));
    }
}

// ---------------------------------------------------------------- instrumentation

/// Wraps each span in Caliper begin/end markers and adds the header.
///
/// # Safety
/// As for [`omps_caliper_profile_render`].
#[no_mangle]
pub unsafe extern "C" fn omps_instrument(
    code: *const c_char,
    spans: *const OmpsSpan,
    n_spans: usize,
    out: *mut *mut c_char,
) -> OmpsStatus {
    guard(|| {
        let code = input(code, "code")?;
        let spans = spans_from(spans, n_spans)?;
        put_string(out, instrument_with_caliper(code, &spans)?)
    })
}

/// Removes markers and the header inserted by [`omps_instrument`].
///
/// # Safety
/// `code` must be a valid string; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn omps_strip_markers(code: *const c_char, out: *mut *mut c_char) -> OmpsStatus {
    guard(|| {
        let code = input(code, "code")?;
        put_string(out, strip_caliper_markers(code))
    })
}

/// Checks that markers pair up and nest; `Format` otherwise.
///
/// # Safety
/// `code` must be a valid string.
#[no_mangle]
pub unsafe extern "C" fn omps_check_marker_nesting(code: *const c_char) -> OmpsStatus {
    guard(|| {
        let code = input(code, "code")?;
        check_marker_nesting(code)?;
        Ok(())
    })
}
