//! C ABI over the forksim simulator.
//!
//! Every function returns an [`FsimStatus`]; on failure the message is
//! available from [`fsim_last_error_message`] on the same thread. Handles
//! are opaque and owned by the caller until passed to their `_free`.
//! Strings returned by the library are freed with [`fsim_string_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use forksim::error::{ConfigError, SimError};
use forksim::metrics::QueryClass;
use forksim::scenario::{run, RunOutput, ScenarioConfig, Verdict};
use forksim::vm::table_shape;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FsimStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    /// Malformed or invalid scenario.
    Config = 3,
    /// The simulation itself failed.
    Sim = 4,
    Io = 5,
    /// Nothing to report, e.g. a percentile of an empty class.
    NoData = 6,
    InvalidArgument = 7,
    Panic = 8,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FsimVerdict {
    Pass = 0,
    LeakDetected = 1,
    Fail = 2,
    Unchecked = 3,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct FsimTableShape {
    pub pgd_entries: u64,
    pub pud_entries: u64,
    pub pmd_entries: u64,
    pub pte_entries: u64,
}

/// A parsed scenario.
pub struct FsimScenario {
    cfg: ScenarioConfig,
}

/// The result of one run.
pub struct FsimReport {
    out: RunOutput,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("no interior NUL");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

struct Failure(FsimStatus, String);

impl From<SimError> for Failure {
    fn from(e: SimError) -> Self {
        let status = match &e {
            SimError::Config(ConfigError::Io { .. }) | SimError::Output { .. } => FsimStatus::Io,
            SimError::Config(_) => FsimStatus::Config,
            _ => FsimStatus::Sim,
        };
        Failure(status, e.to_string())
    }
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        SimError::from(e).into()
    }
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> FsimStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => FsimStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_error(format!("internal panic: {msg}"));
            FsimStatus::Panic
        }
    }
}

fn null(what: &str) -> Failure {
    Failure(FsimStatus::NullPointer, format!("{what} is null"))
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p).to_str().map_err(|_| Failure(FsimStatus::InvalidUtf8, format!("{what} is not UTF-8")))
}

unsafe fn handle<'a, T>(p: *const T, what: &str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or_else(|| null(what))
}

fn out_ptr<T>(p: *mut T, what: &str) -> Result<(), Failure> {
    if p.is_null() {
        Err(null(what))
    } else {
        Ok(())
    }
}

/// Page-table entry counts per level for `mem_bytes` mapped from zero.
///
/// # Safety
/// `out` must point to writable memory for one `FsimTableShape`.
#[no_mangle]
pub unsafe extern "C" fn fsim_table_shape(mem_bytes: u64, page_bytes: u64, out: *mut FsimTableShape) -> FsimStatus {
    guard(|| {
        out_ptr(out, "out")?;
        let s = table_shape(mem_bytes, page_bytes).map_err(|e| Failure(FsimStatus::InvalidArgument, e.to_string()))?;
        *out = FsimTableShape {
            pgd_entries: s.pgd_entries,
            pud_entries: s.pud_entries,
            pmd_entries: s.pmd_entries,
            pte_entries: s.pte_entries,
        };
        Ok(())
    })
}

/// Parses a TOML scenario.
///
/// # Safety
/// `toml` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn fsim_scenario_parse(toml: *const c_char, out: *mut *mut FsimScenario) -> FsimStatus {
    guard(|| {
        out_ptr(out, "out")?;
        *out = ptr::null_mut();
        let cfg = ScenarioConfig::from_toml(str_arg(toml, "toml")?)?;
        *out = Box::into_raw(Box::new(FsimScenario { cfg }));
        Ok(())
    })
}

/// Loads a TOML scenario file.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn fsim_scenario_load(path: *const c_char, out: *mut *mut FsimScenario) -> FsimStatus {
    guard(|| {
        out_ptr(out, "out")?;
        *out = ptr::null_mut();
        let cfg = ScenarioConfig::load(Path::new(str_arg(path, "path")?))?;
        *out = Box::into_raw(Box::new(FsimScenario { cfg }));
        Ok(())
    })
}

/// Runs a scenario to completion.
///
/// # Safety
/// `scenario` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn fsim_scenario_run(scenario: *const FsimScenario, out: *mut *mut FsimReport) -> FsimStatus {
    guard(|| {
        out_ptr(out, "out")?;
        *out = ptr::null_mut();
        let s = handle(scenario, "scenario")?;
        let report = run(&s.cfg)?;
        *out = Box::into_raw(Box::new(FsimReport { out: report }));
        Ok(())
    })
}

/// # Safety
/// `scenario` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn fsim_scenario_free(scenario: *mut FsimScenario) {
    if !scenario.is_null() {
        drop(Box::from_raw(scenario));
    }
}

/// The run summary as pretty-printed JSON. Free with `fsim_string_free`.
///
/// # Safety
/// `report` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn fsim_report_summary_json(report: *const FsimReport, out: *mut *mut c_char) -> FsimStatus {
    guard(|| {
        out_ptr(out, "out")?;
        *out = ptr::null_mut();
        let r = handle(report, "report")?;
        *out = CString::new(r.out.summary_json()).expect("json has no NUL").into_raw();
        Ok(())
    })
}

/// 99th-percentile latency in ns of normal (`snapshot == 0`) or snapshot
/// queries. `FSIM_STATUS_NO_DATA` when the class is empty.
///
/// # Safety
/// `report` must be a live handle; `out_ns` must be writable.
#[no_mangle]
pub unsafe extern "C" fn fsim_report_p99(report: *const FsimReport, snapshot: bool, out_ns: *mut u64) -> FsimStatus {
    guard(|| {
        out_ptr(out_ns, "out_ns")?;
        let r = handle(report, "report")?;
        let class = if snapshot { QueryClass::Snapshot } else { QueryClass::Normal };
        let p = r
            .out
            .class_summary(class)
            .p99_ns
            .ok_or_else(|| Failure(FsimStatus::NoData, format!("no {} queries", class.as_str())))?;
        *out_ns = p;
        Ok(())
    })
}

/// # Safety
/// `report` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn fsim_report_consistency(report: *const FsimReport, out: *mut FsimVerdict) -> FsimStatus {
    guard(|| {
        out_ptr(out, "out")?;
        let r = handle(report, "report")?;
        *out = match r.out.verdict() {
            Verdict::Pass => FsimVerdict::Pass,
            Verdict::LeakDetected => FsimVerdict::LeakDetected,
            Verdict::Fail => FsimVerdict::Fail,
            Verdict::Unchecked => FsimVerdict::Unchecked,
        };
        Ok(())
    })
}

/// Writes the CSV and JSON reports (and `trace.jsonl` when `trace`) into
/// `dir`, creating it if needed.
///
/// # Safety
/// `report` must be a live handle; `dir` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn fsim_report_write(report: *const FsimReport, dir: *const c_char, trace: bool) -> FsimStatus {
    guard(|| {
        let r = handle(report, "report")?;
        let dir = str_arg(dir, "dir")?;
        r.out.write_to(Path::new(dir), trace)?;
        Ok(())
    })
}

/// # Safety
/// `report` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn fsim_report_free(report: *mut FsimReport) {
    if !report.is_null() {
        drop(Box::from_raw(report));
    }
}

/// # Safety
/// `s` must be null or a string returned by this library, not yet freed.
#[no_mangle]
pub unsafe extern "C" fn fsim_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Message of the last failure on this thread, or null. Valid until the
/// next failing call on the same thread; do not free.
#[no_mangle]
pub extern "C" fn fsim_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}
