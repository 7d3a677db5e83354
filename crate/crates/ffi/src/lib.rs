//! C ABI over the iacksim simulator.
//!
//! Every fallible call returns an [`IacksimStatus`]; on failure the message
//! is kept per thread and can be read with [`iacksim_last_error_message`].
//! Handles are opaque and must be released with their `_free` function.
//! Strings returned through `char **` out-parameters belong to the caller and
//! are released with [`iacksim_string_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use iacksim::analysis::{self, LossScenario};
use iacksim::cli::{self, RunReport};
use iacksim::config::ScenarioConfig;
use iacksim::traces::HandshakeObservation;
use iacksim::ServerMode;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IacksimStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    InvalidConfig = 3,
    SimulationFailed = 4,
    InvalidArgument = 5,
    OutOfRange = 6,
    /// The run never delivered a first application byte.
    Incomplete = 7,
    Panic = 8,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IacksimMode {
    Iack = 0,
    Wfc = 1,
}

impl From<ServerMode> for IacksimMode {
    fn from(m: ServerMode) -> Self {
        match m {
            ServerMode::Iack => IacksimMode::Iack,
            ServerMode::Wfc => IacksimMode::Wfc,
        }
    }
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IacksimLoss {
    None = 0,
    FirstServerFlightRemainder = 1,
    SecondClientFlight = 2,
}

impl From<IacksimLoss> for LossScenario {
    fn from(l: IacksimLoss) -> Self {
        match l {
            IacksimLoss::None => LossScenario::None,
            IacksimLoss::FirstServerFlightRemainder => LossScenario::FirstServerFlightRemainder,
            IacksimLoss::SecondClientFlight => LossScenario::SecondClientFlight,
        }
    }
}

/// Parsed and validated scenario file.
pub struct IacksimScenario {
    cfg: ScenarioConfig,
}

/// Results of every cell of a scenario, in expansion order.
pub struct IacksimRunSet {
    report: RunReport,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    let c = CString::new(msg).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn clear_error() {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
}

fn fail(status: IacksimStatus, msg: impl Into<String>) -> IacksimStatus {
    set_error(msg);
    status
}

/// Runs `f`, clearing the last error first and turning panics into a status.
fn guard(f: impl FnOnce() -> IacksimStatus) -> IacksimStatus {
    clear_error();
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(s) => s,
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".to_string());
            fail(IacksimStatus::Panic, msg)
        }
    }
}

unsafe fn read_str<'a>(p: *const c_char) -> Result<&'a str, IacksimStatus> {
    if p.is_null() {
        return Err(fail(IacksimStatus::NullPointer, "null string argument"));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|e| fail(IacksimStatus::InvalidUtf8, e.to_string()))
}

fn into_c_string(s: String) -> *mut c_char {
    CString::new(s.replace('\0', " "))
        .expect("nul bytes removed")
        .into_raw()
}

/// Message for the last failed call on this thread, or NULL. The pointer
/// stays valid until the next iacksim call on the same thread.
#[no_mangle]
pub extern "C" fn iacksim_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// # Safety
/// `s` must be NULL or a string returned by this library, freed once.
#[no_mangle]
pub unsafe extern "C" fn iacksim_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Parses and validates a TOML scenario.
///
/// # Safety
/// `toml` must be a NUL-terminated string; `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn iacksim_scenario_from_toml(
    toml: *const c_char,
    out: *mut *mut IacksimScenario,
) -> IacksimStatus {
    guard(|| {
        if out.is_null() {
            return fail(IacksimStatus::NullPointer, "null out pointer");
        }
        *out = ptr::null_mut();
        let text = match read_str(toml) {
            Ok(t) => t,
            Err(s) => return s,
        };
        match ScenarioConfig::from_toml_str(text) {
            Ok(cfg) => {
                *out = Box::into_raw(Box::new(IacksimScenario { cfg }));
                IacksimStatus::Ok
            }
            Err(e) => fail(IacksimStatus::InvalidConfig, e.to_string()),
        }
    })
}

/// # Safety
/// `scenario` must be NULL or a handle from `iacksim_scenario_from_toml`.
#[no_mangle]
pub unsafe extern "C" fn iacksim_scenario_free(scenario: *mut IacksimScenario) {
    if !scenario.is_null() {
        drop(Box::from_raw(scenario));
    }
}

/// Number of runs the scenario expands to.
///
/// # Safety
/// `scenario` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn iacksim_scenario_cell_count(
    scenario: *const IacksimScenario,
    out: *mut usize,
) -> IacksimStatus {
    guard(|| {
        if scenario.is_null() || out.is_null() {
            return fail(IacksimStatus::NullPointer, "null argument");
        }
        match (*scenario).cfg.expand() {
            Ok(cells) => {
                *out = cells.len();
                IacksimStatus::Ok
            }
            Err(e) => fail(IacksimStatus::InvalidConfig, e.to_string()),
        }
    })
}

/// Runs every cell. `parallelism` 0 uses all cores; results do not depend
/// on it.
///
/// # Safety
/// `scenario` must be a live handle; `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn iacksim_scenario_run(
    scenario: *const IacksimScenario,
    parallelism: usize,
    out: *mut *mut IacksimRunSet,
) -> IacksimStatus {
    guard(|| {
        if scenario.is_null() || out.is_null() {
            return fail(IacksimStatus::NullPointer, "null argument");
        }
        *out = ptr::null_mut();
        let par = (parallelism > 0).then_some(parallelism);
        match cli::run_cells(&(*scenario).cfg, par) {
            Ok(report) => {
                *out = Box::into_raw(Box::new(IacksimRunSet { report }));
                IacksimStatus::Ok
            }
            Err(cli::CliError::Config(e)) => fail(IacksimStatus::InvalidConfig, e.to_string()),
            Err(e) => fail(IacksimStatus::SimulationFailed, e.to_string()),
        }
    })
}

/// # Safety
/// `runs` must be NULL or a handle from `iacksim_scenario_run`.
#[no_mangle]
pub unsafe extern "C" fn iacksim_runset_free(runs: *mut IacksimRunSet) {
    if !runs.is_null() {
        drop(Box::from_raw(runs));
    }
}

/// Number of runs; 0 for NULL.
///
/// # Safety
/// `runs` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn iacksim_runset_len(runs: *const IacksimRunSet) -> usize {
    runs.as_ref().map_or(0, |r| r.report.rows.len())
}

unsafe fn row<'a>(
    runs: *const IacksimRunSet,
    index: usize,
) -> Result<&'a analysis::CsvRow, IacksimStatus> {
    let Some(r) = runs.as_ref() else {
        return Err(fail(IacksimStatus::NullPointer, "null run set"));
    };
    r.report.rows.get(index).ok_or_else(|| {
        fail(
            IacksimStatus::OutOfRange,
            format!("index {index} out of range (len {})", r.report.rows.len()),
        )
    })
}

/// Time to first application byte of run `index`, in microseconds.
/// Returns `Incomplete` when the run timed out.
///
/// # Safety
/// `runs` must be a live handle; `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn iacksim_runset_ttfb_us(
    runs: *const IacksimRunSet,
    index: usize,
    out: *mut u64,
) -> IacksimStatus {
    guard(|| {
        if out.is_null() {
            return fail(IacksimStatus::NullPointer, "null out pointer");
        }
        match row(runs, index) {
            Ok(r) => match r.ttfb_us {
                Some(t) => {
                    *out = t;
                    IacksimStatus::Ok
                }
                None => fail(IacksimStatus::Incomplete, format!("{} did not complete", r.scenario_id)),
            },
            Err(s) => s,
        }
    })
}

/// # Safety
/// `runs` must be a live handle; `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn iacksim_runset_mode(
    runs: *const IacksimRunSet,
    index: usize,
    out: *mut IacksimMode,
) -> IacksimStatus {
    guard(|| {
        if out.is_null() {
            return fail(IacksimStatus::NullPointer, "null out pointer");
        }
        match row(runs, index) {
            Ok(r) => {
                *out = r.mode.into();
                IacksimStatus::Ok
            }
            Err(s) => s,
        }
    })
}

/// Scenario id of run `index` as a new string.
///
/// # Safety
/// `runs` must be a live handle; `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn iacksim_runset_scenario_id(
    runs: *const IacksimRunSet,
    index: usize,
    out: *mut *mut c_char,
) -> IacksimStatus {
    guard(|| {
        if out.is_null() {
            return fail(IacksimStatus::NullPointer, "null out pointer");
        }
        *out = ptr::null_mut();
        match row(runs, index) {
            Ok(r) => {
                *out = into_c_string(r.scenario_id.clone());
                IacksimStatus::Ok
            }
            Err(s) => s,
        }
    })
}

/// Per-run results as CSV text, same format as the CLI's `<name>.csv`.
///
/// # Safety
/// `runs` must be a live handle; `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn iacksim_runset_csv(
    runs: *const IacksimRunSet,
    out: *mut *mut c_char,
) -> IacksimStatus {
    guard(|| {
        if runs.is_null() || out.is_null() {
            return fail(IacksimStatus::NullPointer, "null argument");
        }
        *out = ptr::null_mut();
        match cli::csv_string(&(*runs).report.rows) {
            Ok(text) => {
                *out = into_c_string(text);
                IacksimStatus::Ok
            }
            Err(e) => fail(IacksimStatus::SimulationFailed, e.to_string()),
        }
    })
}

/// Classifies one handshake observation (JSON object) and writes the result
/// as a JSON object with `classification`, `ack_sh_delay_us`,
/// `ack_delay_exceeds_rtt` and `ack_delay_minus_rtt_us`.
///
/// # Safety
/// `json` must be a NUL-terminated string; `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn iacksim_classify_observation_json(
    json: *const c_char,
    out: *mut *mut c_char,
) -> IacksimStatus {
    guard(|| {
        if out.is_null() {
            return fail(IacksimStatus::NullPointer, "null out pointer");
        }
        *out = ptr::null_mut();
        let text = match read_str(json) {
            Ok(t) => t,
            Err(s) => return s,
        };
        let obs: HandshakeObservation = match serde_json::from_str(text) {
            Ok(o) => o,
            Err(e) => return fail(IacksimStatus::InvalidArgument, e.to_string()),
        };
        let row = cli::classification_row(1, &obs);
        let value = serde_json::json!({
            "id": row.id,
            "classification": row.classification,
            "ack_sh_delay_us": row.ack_sh_delay_us,
            "ack_delay_exceeds_rtt": row.ack_delay_exceeds_rtt,
            "ack_delay_minus_rtt_us": row.ack_delay_minus_rtt_us,
        });
        *out = into_c_string(value.to_string());
        IacksimStatus::Ok
    })
}

/// Client PTO after one RTT sample.
#[no_mangle]
pub extern "C" fn iacksim_first_pto_us(rtt_us: u64) -> u64 {
    analysis::first_pto(rtt_us)
}

/// Client PTO under WFC and IACK after `sample_index + 1` samples.
///
/// # Safety
/// `wfc_out` and `iack_out` must be writable pointers.
#[no_mangle]
pub unsafe extern "C" fn iacksim_pto_at_sample(
    rtt_us: u64,
    delta_t_us: u64,
    sample_index: usize,
    wfc_out: *mut u64,
    iack_out: *mut u64,
) -> IacksimStatus {
    guard(|| {
        if wfc_out.is_null() || iack_out.is_null() {
            return fail(IacksimStatus::NullPointer, "null out pointer");
        }
        match analysis::pto_evolution(rtt_us, delta_t_us, sample_index + 1) {
            Ok(series) => {
                let p = series.points[sample_index];
                *wfc_out = p.pto_wfc_us;
                *iack_out = p.pto_iack_us;
                IacksimStatus::Ok
            }
            Err(e) => fail(IacksimStatus::InvalidArgument, e.to_string()),
        }
    })
}

/// Whether an IACK client probes before the ServerHello arrives.
///
/// # Safety
/// `out` must be a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn iacksim_spurious_retransmit(
    rtt_us: u64,
    delta_t_us: u64,
    out: *mut bool,
) -> IacksimStatus {
    guard(|| {
        if out.is_null() {
            return fail(IacksimStatus::NullPointer, "null out pointer");
        }
        if rtt_us == 0 {
            return fail(IacksimStatus::InvalidArgument, "rtt must be positive");
        }
        *out = analysis::spurious_retransmit(rtt_us, delta_t_us);
        IacksimStatus::Ok
    })
}

/// Recommended server mode for a deployment situation.
#[no_mangle]
pub extern "C" fn iacksim_recommend_mode(
    cert_exceeds_limit: bool,
    loss: IacksimLoss,
    delta_t_us: u64,
    rtt_us: u64,
) -> IacksimMode {
    analysis::recommend_mode(cert_exceeds_limit, loss.into(), delta_t_us, rtt_us).into()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn error_message_roundtrip() {
        set_error("boom\0x");
        let msg = unsafe { CStr::from_ptr(iacksim_last_error_message()) };
        assert_eq!(msg.to_str().unwrap(), "boom x");
        clear_error();
        assert!(iacksim_last_error_message().is_null());
    }

    #[test]
    fn panics_become_status() {
        assert_eq!(guard(|| panic!("bad")), IacksimStatus::Panic);
        let msg = unsafe { CStr::from_ptr(iacksim_last_error_message()) };
        assert_eq!(msg.to_str().unwrap(), "bad");
    }

    #[test]
    fn mode_and_loss_mapping() {
        assert_eq!(IacksimMode::from(ServerMode::Wfc), IacksimMode::Wfc);
        for (c, r) in [
            (IacksimLoss::None, LossScenario::None),
            (IacksimLoss::FirstServerFlightRemainder, LossScenario::FirstServerFlightRemainder),
            (IacksimLoss::SecondClientFlight, LossScenario::SecondClientFlight),
        ] {
            assert_eq!(LossScenario::from(c), r);
        }
    }
}
