use std::ffi::{CStr, CString};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::ptr;

use abstention::steerlab::{item_ids, steering_pipeline, Agent, AgentConfig};
use abstention::trialstore::STEERING_GRID;
use abstention_ffi::*;

fn header() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("include").join("abstention.h")
}

#[test]
fn header_compiles_as_c_and_cpp() {
    for (compiler, lang) in [("cc", "c"), ("c++", "c++")] {
        let out = Command::new(compiler)
            .args(["-fsyntax-only", "-Wall", "-Werror", "-x", lang])
            .arg(header())
            .output()
            .expect("C compiler available");
        assert!(out.status.success(), "{compiler}: {}", String::from_utf8_lossy(&out.stderr));
    }
}

#[test]
fn c_program_links_against_static_library() {
    let target = Path::new(env!("CARGO_TARGET_TMPDIR")).parent().unwrap().to_path_buf();
    let lib = ["debug", "release"]
        .iter()
        .map(|p| target.join(p).join("libabstention_ffi.a"))
        .find(|p| p.exists())
        .expect("static library built alongside the tests");
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("main.c");
    std::fs::write(
        &src,
        r#"#include <stdio.h>
#include "abstention.h"
int main(void) {
    double z[2] = {1.3862943611198906, 0.0}, p[2];
    if (abst_scaled_softmax(z, 2, 2.0, p) != ABST_STATUS_OK) return 1;
    if (abst_scaled_softmax(z, 2, -1.0, p) != ABST_STATUS_DOMAIN) return 2;
    if (abst_last_error() == NULL) return 3;
    AbstDecisionParams d;
    if (abst_derive_phase2(2.692, -5.575, -0.837, 0.66, &d) != ABST_STATUS_OK) return 4;
    printf("%.4f %.3f\n", p[0], d.t50);
    return 0;
}
"#,
    )
    .unwrap();
    let exe = dir.path().join("main");
    let build = Command::new("cc")
        .arg(&src)
        .arg("-I")
        .arg(header().parent().unwrap())
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&exe)
        .output()
        .unwrap();
    assert!(build.status.success(), "{}", String::from_utf8_lossy(&build.stderr));
    let run = Command::new(&exe).output().unwrap();
    assert!(run.status.success(), "exit {:?}", run.status.code());
    assert_eq!(String::from_utf8_lossy(&run.stdout).trim(), "0.6667 0.384");
}

#[test]
fn mediation_handle_from_records() {
    let agent = Agent::new(AgentConfig::default()).unwrap();
    let train = item_ids(600);
    let eval: Vec<String> = (600..720).map(|i| format!("q{i:04}")).collect();
    let (_, _, sweep) = steering_pipeline(&agent, &train, &eval, &STEERING_GRID, &[4], 0, None).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("records.jsonl");
    let lines: Vec<String> = sweep.records.iter().map(|r| serde_json::to_string(r).unwrap()).collect();
    std::fs::write(&path, lines.join("\n")).unwrap();
    let cpath = CString::new(path.to_str().unwrap()).unwrap();

    let mut h = ptr::null_mut();
    let status = unsafe { abst_mediation_run(cpath.as_ptr(), false, 100, 5, &mut h) };
    assert_eq!(status, AbstStatus::Ok);
    let mut s = AbstMediationSummary::default();
    assert_eq!(unsafe { abst_mediation_summary(h, &mut s) }, AbstStatus::Ok);
    assert!(s.indirect1_low <= s.indirect1 && s.indirect1 <= s.indirect1_high);
    assert!(s.total_effect < 0.0);

    let mut json = ptr::null_mut();
    assert_eq!(unsafe { abst_mediation_to_json(h, &mut json) }, AbstStatus::Ok);
    let text = unsafe { CStr::from_ptr(json) }.to_str().unwrap().to_owned();
    unsafe { abst_string_free(json) };
    unsafe { abst_mediation_free(h) };
    let v: serde_json::Value = serde_json::from_str(&text).unwrap();
    assert_eq!(v["B"], 100);

    let missing = CString::new(dir.path().join("absent.jsonl").to_str().unwrap()).unwrap();
    let mut h2 = ptr::null_mut();
    assert_eq!(unsafe { abst_mediation_run(missing.as_ptr(), false, 100, 5, &mut h2) }, AbstStatus::Io);
    assert!(h2.is_null());
    assert_eq!(unsafe { abst_mediation_run(cpath.as_ptr(), false, 10, 5, &mut h2) }, AbstStatus::InvalidArgument);
}
