use std::ffi::{CStr, CString};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::ptr;

use iacksim_ffi::*;

const TOML: &str = r#"
name = "ffi"
rtt_us = 9000
delta_t_us = [0, 4000]
profiles = "neqo"
bandwidth_bits_per_s = 0
"#;

fn scenario(text: &str) -> (IacksimStatus, *mut IacksimScenario) {
    let c = CString::new(text).unwrap();
    let mut out = ptr::null_mut();
    let s = unsafe { iacksim_scenario_from_toml(c.as_ptr(), &mut out) };
    (s, out)
}

fn last_error() -> String {
    let p = iacksim_last_error_message();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_str().unwrap().to_string()
}

fn take_string(p: *mut std::ffi::c_char) -> String {
    let s = unsafe { CStr::from_ptr(p) }.to_str().unwrap().to_string();
    unsafe { iacksim_string_free(p) };
    s
}

#[test]
fn scenario_run_and_getters() {
    let (s, sc) = scenario(TOML);
    assert_eq!(s, IacksimStatus::Ok);
    let mut cells = 0;
    assert_eq!(unsafe { iacksim_scenario_cell_count(sc, &mut cells) }, IacksimStatus::Ok);
    assert_eq!(cells, 4);

    let mut runs = ptr::null_mut();
    assert_eq!(unsafe { iacksim_scenario_run(sc, 0, &mut runs) }, IacksimStatus::Ok);
    assert_eq!(unsafe { iacksim_runset_len(runs) }, 4);
    for i in 0..4 {
        let mut ttfb = 0;
        assert_eq!(unsafe { iacksim_runset_ttfb_us(runs, i, &mut ttfb) }, IacksimStatus::Ok);
        let mut id = ptr::null_mut();
        assert_eq!(unsafe { iacksim_runset_scenario_id(runs, i, &mut id) }, IacksimStatus::Ok);
        let id = take_string(id);
        // lossless, no serialization: 2 rtt + delta_t
        let want = if id.contains("-dt0-") { 18_000 } else { 22_000 };
        assert_eq!(ttfb, want, "{id}");
        let mut mode = IacksimMode::Iack;
        assert_eq!(unsafe { iacksim_runset_mode(runs, i, &mut mode) }, IacksimStatus::Ok);
        assert_eq!(id.contains("-wfc-"), mode == IacksimMode::Wfc);
    }

    let mut csv = ptr::null_mut();
    assert_eq!(unsafe { iacksim_runset_csv(runs, &mut csv) }, IacksimStatus::Ok);
    let csv = take_string(csv);
    assert_eq!(csv.lines().next().unwrap(), iacksim::analysis::CSV_HEADER);
    assert_eq!(csv.lines().count(), 5);

    let mut t = 0;
    assert_eq!(unsafe { iacksim_runset_ttfb_us(runs, 4, &mut t) }, IacksimStatus::OutOfRange);
    assert!(last_error().contains("out of range"));

    unsafe {
        iacksim_runset_free(runs);
        iacksim_scenario_free(sc);
    }
}

#[test]
fn incomplete_run_reports_status() {
    let (_, sc) = scenario(
        r#"
name = "stuck"
cert_bytes = 5113
delta_t_us = 4000
modes = "iack"
profiles = "mvfst"
[[loss]]
direction = "server_to_client"
content = "remaining_first_server_flight"
"#,
    );
    let mut runs = ptr::null_mut();
    assert_eq!(unsafe { iacksim_scenario_run(sc, 1, &mut runs) }, IacksimStatus::Ok);
    let mut t = 0;
    assert_eq!(unsafe { iacksim_runset_ttfb_us(runs, 0, &mut t) }, IacksimStatus::Incomplete);
    unsafe {
        iacksim_runset_free(runs);
        iacksim_scenario_free(sc);
    }
}

#[test]
fn invalid_config_and_null_arguments() {
    let (s, sc) = scenario("name = \"x\"\nprofiles = [\"nope\"]\n");
    assert_eq!(s, IacksimStatus::InvalidConfig);
    assert!(sc.is_null());
    assert!(last_error().contains("profiles[0]"));

    let mut out = ptr::null_mut();
    assert_eq!(unsafe { iacksim_scenario_from_toml(ptr::null(), &mut out) }, IacksimStatus::NullPointer);
    assert_eq!(unsafe { iacksim_runset_len(ptr::null()) }, 0);
    unsafe {
        iacksim_scenario_free(ptr::null_mut());
        iacksim_runset_free(ptr::null_mut());
        iacksim_string_free(ptr::null_mut());
    }

    let bytes = [0xffu8, 0];
    assert_eq!(
        unsafe { iacksim_scenario_from_toml(bytes.as_ptr().cast(), &mut out) },
        IacksimStatus::InvalidUtf8
    );
}

#[test]
fn classify_observation() {
    let json = CString::new(
        r#"{"id":"a","client_hello_time_us":0,"measured_rtt_us":9000,"server_records":[
            {"time_us":9000,"contains_ack":true,"contains_server_hello":false,"same_datagram":false,"ack_delay_us":12000},
            {"time_us":13000,"contains_ack":false,"contains_server_hello":true,"same_datagram":false}]}"#,
    )
    .unwrap();
    let mut out = ptr::null_mut();
    assert_eq!(unsafe { iacksim_classify_observation_json(json.as_ptr(), &mut out) }, IacksimStatus::Ok);
    let v: serde_json::Value = serde_json::from_str(&take_string(out)).unwrap();
    assert_eq!(v["classification"], "iack");
    assert_eq!(v["ack_sh_delay_us"], 4000);
    assert_eq!(v["ack_delay_exceeds_rtt"], true);
    assert_eq!(v["ack_delay_minus_rtt_us"], 3000);

    let bad = CString::new("{}").unwrap();
    assert_eq!(
        unsafe { iacksim_classify_observation_json(bad.as_ptr(), &mut out) },
        IacksimStatus::InvalidArgument
    );
    assert!(out.is_null());
}

#[test]
fn pto_helpers() {
    assert_eq!(iacksim_first_pto_us(9000), 27_000);
    let (mut wfc, mut iack) = (0, 0);
    assert_eq!(unsafe { iacksim_pto_at_sample(9000, 4000, 0, &mut wfc, &mut iack) }, IacksimStatus::Ok);
    assert_eq!(wfc - iack, 12_000);
    assert_eq!(
        unsafe { iacksim_pto_at_sample(0, 4000, 0, &mut wfc, &mut iack) },
        IacksimStatus::InvalidArgument
    );

    let mut sp = false;
    assert_eq!(unsafe { iacksim_spurious_retransmit(9000, 27_000, &mut sp) }, IacksimStatus::Ok);
    assert!(sp);
    assert_eq!(unsafe { iacksim_spurious_retransmit(9000, 26_000, &mut sp) }, IacksimStatus::Ok);
    assert!(!sp);
    assert_eq!(unsafe { iacksim_spurious_retransmit(0, 1, &mut sp) }, IacksimStatus::InvalidArgument);

    assert_eq!(iacksim_recommend_mode(true, IacksimLoss::None, 100_000, 1000), IacksimMode::Iack);
    assert_eq!(
        iacksim_recommend_mode(false, IacksimLoss::FirstServerFlightRemainder, 0, 9000),
        IacksimMode::Wfc
    );
    assert_eq!(iacksim_recommend_mode(false, IacksimLoss::None, 26_000, 9000), IacksimMode::Iack);
}

#[test]
fn header_declares_exports() {
    let header = std::fs::read_to_string(Path::new(env!("CARGO_MANIFEST_DIR")).join("include/iacksim.h")).unwrap();
    for sym in [
        "iacksim_last_error_message",
        "iacksim_string_free",
        "iacksim_scenario_from_toml",
        "iacksim_scenario_free",
        "iacksim_scenario_run",
        "iacksim_runset_len",
        "iacksim_runset_ttfb_us",
        "iacksim_runset_csv",
        "iacksim_runset_free",
        "iacksim_classify_observation_json",
        "iacksim_pto_at_sample",
        "iacksim_recommend_mode",
        "IACKSIM_STATUS_INCOMPLETE",
    ] {
        assert!(header.contains(sym), "{sym}");
    }
}

fn staticlib() -> Option<PathBuf> {
    // target/<profile>/deps/c_abi-<hash> -> target/<profile>
    let exe = std::env::current_exe().ok()?;
    let lib = exe.parent()?.parent()?.join("libiacksim_ffi.a");
    lib.exists().then_some(lib)
}

#[test]
fn c_program_links_against_header() {
    let Some(lib) = staticlib() else {
        eprintln!("static library not found, skipping");
        return;
    };
    if Command::new("cc").arg("--version").output().is_err() {
        eprintln!("no C compiler, skipping");
        return;
    }
    let dir = Path::new(env!("CARGO_MANIFEST_DIR"));
    let tmp = tempfile::tempdir().unwrap();
    let exe = tmp.path().join("smoke");
    let status = Command::new("cc")
        .arg(dir.join("tests/c/smoke.c"))
        .arg("-I")
        .arg(dir.join("include"))
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&exe)
        .status()
        .unwrap();
    assert!(status.success());
    let out = Command::new(&exe).output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(String::from_utf8_lossy(&out.stdout).trim(), "ok");
}
