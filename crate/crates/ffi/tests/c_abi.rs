use std::ffi::{CStr, CString};
use std::process::Command;
use std::ptr;

use fedsched_ffi::*;

fn last_error() -> String {
    let p = fs_last_error_message();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

fn parse(text: &str) -> (FsStatus, *mut FsConfig) {
    let c = CString::new(text).unwrap();
    let mut cfg = ptr::null_mut();
    let status = unsafe { fs_config_parse(c.as_ptr(), &mut cfg) };
    (status, cfg)
}

#[test]
fn run_through_handles() {
    let (status, cfg) = parse("rounds = 4\nscheduler_global = fedhyper_g\n");
    assert_eq!(status, FsStatus::Ok);
    assert!(fs_last_error_message().is_null());
    unsafe {
        assert_eq!(fs_config_set_seed(cfg, 7), FsStatus::Ok);
        assert_eq!(fs_config_set_workers(cfg, 0), FsStatus::InvalidArgument);
        let mut run = ptr::null_mut();
        assert_eq!(fs_run(cfg, &mut run), FsStatus::Ok);
        assert_eq!(fs_run_len(run), 4);
        let mut row = std::mem::zeroed::<FsMetricsRow>();
        assert_eq!(fs_run_row(run, 3, &mut row), FsStatus::Ok);
        assert_eq!(row.round, 3);
        assert!(row.test_accuracy > 0.0 && row.test_accuracy <= 1.0);
        assert_eq!(fs_run_row(run, 4, &mut row), FsStatus::InvalidArgument);
        assert!(last_error().contains("out of range"));

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        let cpath = CString::new(path.to_str().unwrap()).unwrap();
        assert_eq!(fs_run_write_csv(run, cpath.as_ptr()), FsStatus::Ok);
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), 5);

        let expected = fedsched::run_experiment(&fedsched::ExperimentConfig {
            rounds: 4,
            seed: 7,
            scheduler_global: fedsched::GlobalScheduler::FedHyperG,
            ..Default::default()
        })
        .unwrap();
        assert_eq!(row.alpha, expected[3].alpha);
        fs_run_free(run);
        fs_config_free(cfg);
    }
}

#[test]
fn config_errors_carry_messages() {
    let (status, cfg) = parse("rounds = 2\nbogus = 1\n");
    assert_eq!(status, FsStatus::ConfigParse);
    assert!(cfg.is_null());
    let msg = last_error();
    assert!(msg.contains("line 2") && msg.contains("bogus"), "{msg}");
    let (status, _) = parse("clients_per_round = 50\n");
    assert_eq!(status, FsStatus::InvalidConfig);
    assert_eq!(
        unsafe { fs_config_parse(ptr::null(), ptr::null_mut()) },
        FsStatus::NullPointer
    );
}

#[test]
fn diverged_run_keeps_partial_rows() {
    let (_, cfg) =
        parse("model = quadratic\nrounds = 400\nlocal_steps = 1\ninitial_beta = 2.5\nscheduler_local = fedhyper_cl\n");
    unsafe {
        let mut run = ptr::null_mut();
        assert_eq!(fs_run(cfg, &mut run), FsStatus::Diverged);
        assert!(!run.is_null());
        let n = fs_run_len(run);
        assert!(n > 0 && n < 400);
        let mut row = std::mem::zeroed::<FsMetricsRow>();
        assert_eq!(fs_run_row(run, 0, &mut row), FsStatus::Ok);
        assert!(row.test_accuracy.is_nan());
        fs_run_free(run);
        fs_config_free(cfg);
    }
}

#[test]
fn bound_and_scheduler_steps() {
    let params = FsBoundParams {
        gamma_alpha: 3.0,
        gamma_beta: 1.0,
        sigma_sq: 1.0,
        rho_sq: 1.0,
        clients: 2,
        local_steps: 2,
        rounds: 100,
    };
    let (mut p, mut q, mut b) = (0.0, 0.0, 0.0);
    unsafe {
        assert_eq!(fs_bound(&params, &mut p, &mut q, &mut b), FsStatus::Ok);
        assert_eq!((p, q, b), (6.0, 10.0, 0.35));
        let bad = FsBoundParams {
            gamma_alpha: 0.5,
            ..params
        };
        assert_eq!(
            fs_bound(&bad, &mut p, ptr::null_mut(), ptr::null_mut()),
            FsStatus::InvalidArgument
        );

        let delta = [0.5, -0.5];
        let prev = [0.2, 0.1];
        let mut alpha = 0.0;
        assert_eq!(
            fs_fedhyper_g_step(1.0, delta.as_ptr(), prev.as_ptr(), 2, 3.0, &mut alpha),
            FsStatus::Ok
        );
        assert!((alpha - 1.05).abs() < 1e-15);
        assert_eq!(
            fs_fedhyper_g_step(1.0, delta.as_ptr(), ptr::null(), 2, 3.0, &mut alpha),
            FsStatus::Ok
        );
        assert_eq!(alpha, 1.0);

        let updates = [1.0, 0.0, -1.0, 0.0];
        let mean = [0.0, 0.0];
        assert_eq!(
            fs_fedexp_step(updates.as_ptr(), 2, 2, mean.as_ptr(), 1e-3, &mut alpha),
            FsStatus::Ok
        );
        assert!((alpha - 2.0 / (4.0 * 1e-3)).abs() < 1e-9);
    }
}

#[test]
fn header_is_valid_c() {
    let header = concat!(env!("CARGO_MANIFEST_DIR"), "/include/fedsched.h");
    let text = std::fs::read_to_string(header).unwrap();
    for sym in [
        "fs_config_parse",
        "fs_run_row",
        "fs_bound",
        "FS_STATUS_DIVERGED",
        "typedef struct FsRun FsRun;",
    ] {
        assert!(text.contains(sym), "{sym}");
    }
    let Ok(out) = Command::new("cc")
        .args(["-fsyntax-only", "-Wall", "-Werror", "-x", "c", header])
        .output()
    else {
        eprintln!("no C compiler; skipping syntax check");
        return;
    };
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn c_program_links_and_runs() {
    let exe = std::env::current_exe().unwrap();
    let lib_dir = exe.parent().and_then(|d| d.parent()).unwrap();
    let archive = lib_dir.join("libfedsched_ffi.a");
    if !archive.exists() || Command::new("cc").arg("--version").output().is_err() {
        eprintln!("static archive or C compiler missing; skipping");
        return;
    }
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("main.c");
    std::fs::write(
        &src,
        r#"#include <stdio.h>
#include "fedsched.h"
int main(void) {
    FsConfig *cfg = NULL;
    if (fs_config_parse("rounds = 3\n", &cfg) != FS_STATUS_OK) return 1;
    FsRun *run = NULL;
    if (fs_run(cfg, &run) != FS_STATUS_OK) return 2;
    FsMetricsRow row;
    if (fs_run_row(run, 2, &row) != FS_STATUS_OK) return 3;
    FsBoundParams p = {3.0, 1.0, 1.0, 1.0, 2, 2, 100};
    double b = 0.0;
    if (fs_bound(&p, NULL, NULL, &b) != FS_STATUS_OK) return 4;
    printf("%zu %llu %.2f\n", fs_run_len(run), (unsigned long long)row.round, b);
    if (fs_config_parse("nope\n", &cfg) != FS_STATUS_CONFIG_PARSE) return 5;
    if (fs_last_error_message() == NULL) return 6;
    fs_run_free(run);
    fs_config_free(cfg);
    return 0;
}
"#,
    )
    .unwrap();
    let bin = dir.path().join("main");
    let status = Command::new("cc")
        .arg(&src)
        .arg("-I")
        .arg(concat!(env!("CARGO_MANIFEST_DIR"), "/include"))
        .arg(&archive)
        .args(["-lpthread", "-ldl", "-lm"])
        .arg("-o")
        .arg(&bin)
        .status()
        .unwrap();
    assert!(status.success());
    let out = Command::new(&bin).output().unwrap();
    assert!(out.status.success(), "exit {:?}", out.status.code());
    assert_eq!(String::from_utf8(out.stdout).unwrap(), "3 2 0.35\n");
}
