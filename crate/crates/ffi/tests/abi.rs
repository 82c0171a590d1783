use std::ffi::{CStr, CString};
use std::path::PathBuf;
use std::process::Command;
use std::ptr;

use capres_ffi::*;

fn last_error() -> String {
    let p = capres_last_error_message();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

#[test]
fn oracle_and_errors() {
    let mut v = 0.0;
    let s = unsafe { capres_oracle_concentric_balls(3, 2.0, 0.25, 0.5, &mut v) };
    assert_eq!(s, CapresStatus::Ok);
    assert!((v - 2.0 * std::f64::consts::PI).abs() < 1e-12);
    let s = unsafe { capres_oracle_concentric_balls(3, 1.0, 0.25, 0.5, &mut v) };
    assert_eq!(s, CapresStatus::InvalidInput);
    assert!(!last_error().is_empty());
    let s = unsafe { capres_oracle_concentric_balls(3, 2.0, 0.25, 0.5, ptr::null_mut()) };
    assert_eq!(s, CapresStatus::NullPointer);
}

#[test]
fn lambda_and_svc() {
    let mut v = 0.0;
    assert_eq!(unsafe { capres_lambda_o(3, 4.0, 1.0, &mut v) }, CapresStatus::Ok);
    assert_eq!(v, 1.5);
    assert_eq!(unsafe { capres_lambda_o(3, 2.0, 1.0, &mut v) }, CapresStatus::InvalidInput);
    assert_eq!(unsafe { capres_svc_measure(3, &mut v) }, CapresStatus::Ok);
    // removing 2^(k-1) middle gaps of length 4^-k leaves 1/2 + 2^-(L+1)
    assert_eq!(v, 0.5 + 0.0625);
}

#[test]
fn condenser_handles() {
    let mut c: *mut CapresCondenser = ptr::null_mut();
    assert_eq!(unsafe { capres_condenser_concentric_balls(2, 0.25, 0.5, 2.0, &mut c) }, CapresStatus::Ok);
    let mut out = CapresCapacity::default();
    assert_eq!(unsafe { capres_solve_capacity(c, 33, &mut out) }, CapresStatus::Ok);
    // planar p = 2: 2 pi / ln(R / r)
    let exact = 2.0 * std::f64::consts::PI / 2f64.ln();
    assert!(out.converged && (out.value / exact - 1.0).abs() < 0.1, "{}", out.value);
    unsafe { capres_condenser_free(c) };

    let touching = CString::new(
        r#"{"plate_e":{"kind":"ball","center":[0,0],"radius":0.5},
            "plate_f":{"kind":"annulus","center":[0,0],"inner":0.5,"outer":1.0},
            "ambient":{"kind":"ball","center":[0,0],"radius":1.0},"p":2.0}"#,
    )
    .unwrap();
    let mut c: *mut CapresCondenser = ptr::null_mut();
    assert_eq!(unsafe { capres_condenser_from_json(touching.as_ptr(), &mut c) }, CapresStatus::Ok);
    assert_eq!(unsafe { capres_solve_capacity(c, 17, &mut out) }, CapresStatus::UnderResolved);
    assert!(last_error().contains("share a grid cell"));
    unsafe { capres_condenser_free(c) };

    let bad = CString::new("{").unwrap();
    assert_eq!(unsafe { capres_condenser_from_json(bad.as_ptr(), &mut c) }, CapresStatus::InvalidInput);
    unsafe { capres_condenser_free(ptr::null_mut()) };
}

#[test]
fn cantor_handles() {
    let mut d: *mut CapresCantorDomain = ptr::null_mut();
    assert_eq!(unsafe { capres_cantor_build(1.0, 2.0, 2, 6, false, &mut d) }, CapresStatus::Ok);
    let mut count = 0usize;
    assert_eq!(unsafe { capres_cantor_cylinder_count(d, &mut count) }, CapresStatus::Ok);
    assert!(count > 0);
    let mut inside = false;
    let z = [0.5, 0.5, 0.5];
    assert_eq!(unsafe { capres_cantor_contains(d, z.as_ptr(), 3, &mut inside) }, CapresStatus::Ok);
    assert!(inside);
    assert_eq!(unsafe { capres_cantor_contains(d, z.as_ptr(), 2, &mut inside) }, CapresStatus::InvalidInput);
    unsafe { capres_cantor_free(d) };
    assert_eq!(unsafe { capres_cantor_build(1.0, 2.0, 0, 6, false, &mut d) }, CapresStatus::InvalidInput);
}

#[test]
fn version_string() {
    let v = unsafe { CStr::from_ptr(capres_version()) }.to_str().unwrap();
    assert_eq!(v, env!("CARGO_PKG_VERSION"));
}

#[test]
fn header_declares_exports() {
    let header = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/include/capres.h")).unwrap();
    let src = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/src/lib.rs")).unwrap();
    let exports: Vec<&str> = src
        .lines()
        .filter_map(|l| l.split("extern \"C\" fn ").nth(1))
        .map(|rest| rest.split('(').next().unwrap())
        .collect();
    assert!(exports.len() >= 10);
    for f in exports {
        assert!(header.contains(&format!("{f}(")), "{f} missing from header");
    }
}

/// Compiles a C program against the header and the static library.
#[test]
fn c_program_links_and_runs() {
    let exe = std::env::current_exe().unwrap();
    let profile_dir = exe.parent().and_then(|p| p.parent()).unwrap().to_path_buf();
    let lib = profile_dir.join("libcapres_ffi.a");
    if !lib.exists() || Command::new("cc").arg("--version").output().is_err() {
        eprintln!("skipping: static library or C compiler not available");
        return;
    }
    let dir = tempdir();
    let c_src = dir.join("main.c");
    std::fs::write(
        &c_src,
        r#"#include <stdio.h>
#include <math.h>
#include "capres.h"
int main(void) {
    double v = 0.0;
    if (capres_oracle_concentric_balls(3, 2.0, 0.25, 0.5, &v) != CAPRES_STATUS_OK) return 1;
    if (fabs(v - 6.283185307179586) > 1e-12) return 2;
    if (capres_oracle_concentric_balls(3, 2.0, 0.5, 0.25, &v) == CAPRES_STATUS_OK) return 3;
    if (capres_last_error_message() == NULL) return 4;
    CapresCondenser *c = NULL;
    if (capres_condenser_concentric_balls(3, 0.25, 0.5, 2.0, &c) != CAPRES_STATUS_OK) return 5;
    capres_condenser_free(c);
    printf("%.15f\n", v);
    return 0;
}
"#,
    )
    .unwrap();
    let bin = dir.join("main");
    let status = Command::new("cc")
        .arg(&c_src)
        .arg("-I")
        .arg(concat!(env!("CARGO_MANIFEST_DIR"), "/include"))
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&bin)
        .status()
        .unwrap();
    assert!(status.success(), "C compilation failed");
    let out = Command::new(&bin).output().unwrap();
    assert!(out.status.success(), "exit {:?}", out.status.code());
}

fn tempdir() -> PathBuf {
    let d = std::env::temp_dir().join(format!("capres-ffi-{}", std::process::id()));
    std::fs::create_dir_all(&d).unwrap();
    d
}
