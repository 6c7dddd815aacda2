use std::ffi::{CStr, CString};
use std::ptr;

use opm_ffi::*;

const DOC: &str = r#"{
  "schema_version": 1,
  "kind": "instance",
  "mediators": [
    { "id": "m0", "user_costs": ["1", "3", "5"] },
    { "id": "m1", "user_costs": ["2"] }
  ],
  "advertisers": [
    { "id": "a0", "capacity": 2, "value": "7" },
    { "id": "a1", "capacity": 1, "value": "6" }
  ],
  "tie_order": ["m0", "a0", "m1", "a1"]
}"#;

fn last_error() -> String {
    unsafe { CStr::from_ptr(opm_last_error_message()) }.to_str().unwrap().to_string()
}

fn parsed() -> *mut OpmInstance {
    let json = CString::new(DOC).unwrap();
    let mut inst = ptr::null_mut();
    assert_eq!(unsafe { opm_instance_parse(json.as_ptr(), &mut inst) }, OpmStatus::Ok);
    assert!(!inst.is_null());
    inst
}

#[test]
fn parse_inspect_run_and_free() {
    let inst = parsed();
    let mut tau = 0usize;
    assert_eq!(unsafe { opm_instance_tau(inst, &mut tau) }, OpmStatus::Ok);
    assert_eq!(tau, 3);

    let (half, tenth) = (CString::new("1/2").unwrap(), CString::new("0.1").unwrap());
    let mut passed = false;
    assert_eq!(unsafe { opm_instance_validate(inst, half.as_ptr(), &mut passed) }, OpmStatus::Ok);
    assert!(!passed);
    assert_eq!(unsafe { opm_instance_validate(inst, CString::new("1").unwrap().as_ptr(), &mut passed) }, OpmStatus::Ok);
    assert!(passed);

    let mut outcome = ptr::null_mut();
    assert_eq!(unsafe { opm_run(inst, tenth.as_ptr(), 7, &mut outcome) }, OpmStatus::Ok);
    let (mut gft, mut trades) = (-1i64, 99usize);
    assert_eq!(unsafe { opm_outcome_gft_micros(outcome, &mut gft) }, OpmStatus::Ok);
    assert_eq!(unsafe { opm_outcome_trade_count(outcome, &mut trades) }, OpmStatus::Ok);
    // a tenth is far above the dummy cutoff, so nothing trades
    assert_eq!((gft, trades), (0, 0));

    let mut json = ptr::null_mut();
    assert_eq!(unsafe { opm_outcome_to_json(outcome, &mut json) }, OpmStatus::Ok);
    let text = unsafe { CStr::from_ptr(json) }.to_str().unwrap().to_owned();
    assert!(text.contains("\"kind\": \"run_report\""));
    assert!(text.contains("\"dummy_thresholds\": true"));
    assert_eq!(last_error(), "");
    unsafe {
        opm_string_free(json);
        opm_outcome_free(outcome);
        opm_instance_free(inst);
    }
}

#[test]
fn errors_carry_status_and_message() {
    let bad = CString::new(DOC.replace("\"3\"", "\"-3\"")).unwrap();
    let mut inst = ptr::null_mut();
    assert_eq!(unsafe { opm_instance_parse(bad.as_ptr(), &mut inst) }, OpmStatus::ParseError);
    assert!(inst.is_null());
    assert!(last_error().contains("mediators[0].user_costs[1]"), "{}", last_error());

    assert_eq!(unsafe { opm_instance_parse(ptr::null(), &mut inst) }, OpmStatus::NullArgument);
    assert_eq!(unsafe { opm_instance_tau(ptr::null(), &mut 0) }, OpmStatus::NullArgument);

    let inst = parsed();
    let mut outcome = ptr::null_mut();
    let zero = CString::new("0").unwrap();
    assert_eq!(unsafe { opm_run(inst, zero.as_ptr(), 1, &mut outcome) }, OpmStatus::InvalidArgument);
    assert!(outcome.is_null());
    let junk = CString::new("one half").unwrap();
    assert_eq!(unsafe { opm_run(inst, junk.as_ptr(), 1, &mut outcome) }, OpmStatus::InvalidArgument);
    assert!(!last_error().is_empty());
    let invalid = [0xffu8, 0];
    assert_eq!(unsafe { opm_run(inst, invalid.as_ptr().cast(), 1, &mut outcome) }, OpmStatus::InvalidUtf8);
    unsafe {
        opm_instance_free(inst);
        opm_instance_free(ptr::null_mut());
        opm_outcome_free(ptr::null_mut());
        opm_string_free(ptr::null_mut());
    }
}

#[test]
fn runs_are_deterministic_across_the_boundary() {
    let inst = parsed();
    let alpha = CString::new("1/1000").unwrap();
    let mut texts = Vec::new();
    for _ in 0..2 {
        let mut outcome = ptr::null_mut();
        let mut json = ptr::null_mut();
        unsafe {
            assert_eq!(opm_run(inst, alpha.as_ptr(), 42, &mut outcome), OpmStatus::Ok);
            assert_eq!(opm_outcome_to_json(outcome, &mut json), OpmStatus::Ok);
            texts.push(CStr::from_ptr(json).to_str().unwrap().to_owned());
            opm_string_free(json);
            opm_outcome_free(outcome);
        }
    }
    assert_eq!(texts[0], texts[1]);
    unsafe { opm_instance_free(inst) };
}

#[test]
fn header_declares_the_interface() {
    let header = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/include/opm.h")).unwrap();
    for symbol in [
        "typedef struct OpmInstance OpmInstance;",
        "typedef struct OpmOutcome OpmOutcome;",
        "OPM_STATUS_OK = 0",
        "OPM_STATUS_PANIC",
        "opm_instance_parse(const char *json, OpmInstance **out_instance)",
        "opm_run(",
        "opm_outcome_to_json(",
        "const char *opm_last_error_message(void)",
    ] {
        assert!(header.contains(symbol), "missing {symbol}");
    }
}

#[test]
fn header_compiles_as_c() {
    let Ok(cc) = which_cc() else { return };
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("probe.c");
    std::fs::write(
        &src,
        "#include \"opm.h\"\nint main(void) { OpmInstance *i = 0; return opm_instance_parse(\"{}\", &i) == OPM_STATUS_OK; }\n",
    )
    .unwrap();
    let status = std::process::Command::new(cc)
        .args(["-std=c99", "-Wall", "-Werror", "-fsyntax-only", "-I"])
        .arg(concat!(env!("CARGO_MANIFEST_DIR"), "/include"))
        .arg(&src)
        .status()
        .unwrap();
    assert!(status.success());
}

fn which_cc() -> Result<&'static str, ()> {
    ["cc", "clang", "gcc"]
        .into_iter()
        .find(|c| std::process::Command::new(c).arg("--version").output().is_ok_and(|o| o.status.success()))
        .ok_or(())
}
