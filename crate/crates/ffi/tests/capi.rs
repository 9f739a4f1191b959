use std::ffi::{CStr, CString};
use std::path::PathBuf;
use std::process::Command;
use std::ptr;

use owodlab_ffi::*;

fn last_error() -> String {
    let p = owod_last_error_message();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

fn default_controller() -> *mut OwodController {
    let mut cfg = std::mem::MaybeUninit::<OwodControllerConfig>::uninit();
    assert_eq!(unsafe { owod_controller_config_default(cfg.as_mut_ptr()) }, OwodStatus::Ok);
    let cfg = unsafe { cfg.assume_init() };
    let mut h = ptr::null_mut();
    assert_eq!(unsafe { owod_controller_new(&cfg, &mut h) }, OwodStatus::Ok);
    h
}

#[test]
fn controller_starts_at_initial_weights_and_updates_on_cycle() {
    let h = default_controller();
    let (mut m, mut i) = (0.0, 0.0);
    assert_eq!(unsafe { owod_controller_weights(h, &mut m, &mut i) }, OwodStatus::Ok);
    assert_eq!((m, i), (0.8, 0.2));
    let mut updates = Vec::new();
    // iterations are numbered from 0
    for t in 0..600usize {
        let mut updated = 0;
        let loss = 2.0 + (t as f64 * 0.37).sin();
        let s = unsafe { owod_controller_step(h, loss, &mut updated, &mut m, &mut i) };
        assert_eq!(s, OwodStatus::Ok);
        assert!((m + i - 1.0).abs() < 1e-9);
        if updated == 1 {
            updates.push(t);
        }
    }
    assert_eq!(updates, vec![150, 300, 450]);
    let mut n = 0;
    assert_eq!(unsafe { owod_controller_iteration(h, &mut n) }, OwodStatus::Ok);
    assert_eq!(n, 600);
    unsafe { owod_controller_free(h) };
}

#[test]
fn invalid_arguments_report_codes_and_messages() {
    let mut cfg = std::mem::MaybeUninit::<OwodControllerConfig>::uninit();
    unsafe { owod_controller_config_default(cfg.as_mut_ptr()) };
    let mut cfg = unsafe { cfg.assume_init() };
    cfg.pi_pma = 1.5;
    let mut h = ptr::null_mut();
    assert_eq!(unsafe { owod_controller_new(&cfg, &mut h) }, OwodStatus::Config);
    assert!(h.is_null());
    assert!(!last_error().is_empty());

    assert_eq!(unsafe { owod_controller_new(ptr::null(), &mut h) }, OwodStatus::NullPointer);
    assert!(last_error().contains("config"));

    let h = default_controller();
    let s = unsafe { owod_controller_step(h, f64::NAN, ptr::null_mut(), ptr::null_mut(), ptr::null_mut()) };
    assert_eq!(s, OwodStatus::Data);
    // a successful call clears the message
    let s = unsafe { owod_controller_step(h, 1.0, ptr::null_mut(), ptr::null_mut(), ptr::null_mut()) };
    assert_eq!(s, OwodStatus::Ok);
    assert!(owod_last_error_message().is_null());
    unsafe { owod_controller_free(h) };
    unsafe { owod_controller_free(ptr::null_mut()) };
}

#[test]
fn geometry_entry_points() {
    let a = [0.0, 0.0, 0.5, 0.5];
    let b = [0.25, 0.0, 0.75, 0.5];
    let mut out = 0.0;
    assert_eq!(unsafe { owod_box_iou(a.as_ptr(), b.as_ptr(), &mut out) }, OwodStatus::Ok);
    assert!((out - 1.0 / 3.0).abs() < 1e-12);
    assert_eq!(unsafe { owod_box_giou(a.as_ptr(), b.as_ptr(), &mut out) }, OwodStatus::Ok);
    // hull area equals union area here
    assert!((out - 1.0 / 3.0).abs() < 1e-12);
    let flipped = [0.5, 0.0, 0.0, 0.5];
    assert_eq!(unsafe { owod_box_iou(flipped.as_ptr(), b.as_ptr(), &mut out) }, OwodStatus::Data);
    assert!((owod_fused_score(0.25, 0.5, 0.5, 0.5) - (0.125f64).sqrt()).abs() < 1e-12);
}

#[test]
fn detector_round_trip_and_detect() {
    let mut det = ptr::null_mut();
    assert_eq!(unsafe { owod_detector_new_default(3, &mut det) }, OwodStatus::Ok);
    let (mut size, mut classes) = (0, 0);
    assert_eq!(unsafe { owod_detector_shape(det, &mut size, &mut classes) }, OwodStatus::Ok);
    assert_eq!((size, classes), (64, 6));

    let dir = tempfile::tempdir().unwrap();
    let path = CString::new(dir.path().join("d.bin").to_str().unwrap()).unwrap();
    assert_eq!(unsafe { owod_detector_save(det, path.as_ptr()) }, OwodStatus::Ok);
    let mut loaded = ptr::null_mut();
    assert_eq!(unsafe { owod_detector_load(path.as_ptr(), &mut loaded) }, OwodStatus::Ok);

    let rgb: Vec<u8> = (0..size * size * 3).map(|i| (i * 7 % 251) as u8).collect();
    let known = [0u32, 1, 2];
    let run = |h: *const OwodDetector, cap: usize, out: &mut Vec<OwodDetection>| {
        let mut count = 0;
        let s = unsafe {
            owod_detector_detect(h, rgb.as_ptr(), size, size, known.as_ptr(), 3, 5, out.as_mut_ptr(), cap, &mut count)
        };
        (s, count)
    };
    let mut buf = vec![
        OwodDetection {
            x1: 0.0,
            y1: 0.0,
            x2: 0.0,
            y2: 0.0,
            score: 0.0,
            class_id: 0
        };
        64
    ];
    let (s, n) = run(det, 64, &mut buf);
    assert_eq!(s, OwodStatus::Ok);
    assert!(n > 0 && n <= 50);
    let first: Vec<OwodDetection> = buf[..n].to_vec();
    for d in &first {
        assert!(d.class_id == -1 || (0..3).contains(&d.class_id), "{d:?}");
        assert!(d.x1 <= d.x2 && d.y1 <= d.y2);
    }
    assert!(first.iter().filter(|d| d.class_id == -1).count() <= 5);

    let mut buf2 = buf.clone();
    let (s, n2) = run(loaded, 64, &mut buf2);
    assert_eq!((s, n2), (OwodStatus::Ok, n));
    assert_eq!(&buf2[..n], &first[..]);

    let (s, needed) = run(det, 0, &mut Vec::new());
    assert_eq!((s, needed), (OwodStatus::BufferTooSmall, n));

    let bad = [7u32];
    let mut count = 0;
    let s = unsafe {
        owod_detector_detect(det, rgb.as_ptr(), size, size, bad.as_ptr(), 1, 5, buf.as_mut_ptr(), 64, &mut count)
    };
    assert_eq!(s, OwodStatus::Config);

    let missing = CString::new("/nonexistent/d.bin").unwrap();
    let mut h = ptr::null_mut();
    assert_eq!(unsafe { owod_detector_load(missing.as_ptr(), &mut h) }, OwodStatus::Io);
    unsafe {
        owod_detector_free(det);
        owod_detector_free(loaded);
    }
}

#[test]
fn version_is_the_crate_version() {
    let v = unsafe { CStr::from_ptr(owod_version()) }.to_str().unwrap();
    assert_eq!(v, env!("CARGO_PKG_VERSION"));
}

const C_PROGRAM: &str = r#"
#include <stdio.h>
#include "owodlab.h"

int main(void) {
    OwodControllerConfig cfg;
    if (owod_controller_config_default(&cfg) != OWOD_STATUS_OK) return 1;
    OwodController *c = NULL;
    if (owod_controller_new(&cfg, &c) != OWOD_STATUS_OK) return 2;
    double wm = 0, wi = 0;
    int updated = 0, updates = 0;
    for (int t = 0; t <= 300; t++) {
        if (owod_controller_step(c, 1.0 + 1.0 / (t + 1), &updated, &wm, &wi) != OWOD_STATUS_OK) return 3;
        updates += updated;
    }
    owod_controller_free(c);
    if (owod_controller_new(NULL, &c) != OWOD_STATUS_NULL_POINTER) return 4;
    if (owod_last_error_message() == NULL) return 5;
    printf("%d %.6f\n", updates, wm + wi);
    return 0;
}
"#;

/// Compiles a C program against the generated header and the static
/// library, then runs it.
#[test]
fn header_compiles_and_links_from_c() {
    let crate_dir = PathBuf::from(env!("CARGO_MANIFEST_DIR"));
    let header = crate_dir.join("include/owodlab.h");
    assert!(header.exists(), "header not generated");
    let text = std::fs::read_to_string(&header).unwrap();
    for f in ["owod_controller_new", "owod_detector_detect", "owod_last_error_message", "OWOD_STATUS_DIVERGENCE"] {
        assert!(text.contains(f), "{f} missing from header");
    }

    // target/<profile>/deps/<test-binary>
    let exe = std::env::current_exe().unwrap();
    let profile_dir = exe.parent().and_then(|p| p.parent()).unwrap();
    let lib = profile_dir.join("libowodlab_ffi.a");
    if Command::new("cc").arg("--version").output().is_err() || !lib.exists() {
        eprintln!("skipping C link check: no C compiler or no {}", lib.display());
        return;
    }
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("main.c");
    let bin = dir.path().join("main");
    std::fs::write(&src, C_PROGRAM).unwrap();
    let status = Command::new("cc")
        .arg(&src)
        .arg("-I")
        .arg(crate_dir.join("include"))
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&bin)
        .status()
        .unwrap();
    assert!(status.success(), "C compile failed");
    let out = Command::new(&bin).output().unwrap();
    assert!(out.status.success(), "C program exited with {:?}", out.status);
    assert_eq!(String::from_utf8_lossy(&out.stdout).trim(), "2 1.000000");
}
