use std::ffi::{CStr, CString};
use std::path::{Path, PathBuf};
use std::ptr;

use galaxyedit_ffi::*;

fn last_error() -> String {
    let p = gx_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

fn take(s: *mut std::ffi::c_char) -> String {
    let out = unsafe { CStr::from_ptr(s) }.to_string_lossy().into_owned();
    unsafe { gx_string_free(s) };
    out
}

#[test]
fn volterra_handle_matches_hand_computed_quadratic_form() {
    // c_in = 2, c_out = 1, k = 1, Q = 1: y = w1·x + (a·x)(b·x) per pixel.
    let (w1, a, b) = ([0.5, -1.0], [2.0, 0.5], [-3.0, 1.5]);
    let weights: Vec<f64> = w1.iter().chain(&a).chain(&b).copied().collect();
    let mut layer = ptr::null_mut();
    let st = unsafe { gx_volterra_from_weights(2, 1, 1, 1, weights.as_ptr(), weights.len(), &mut layer) };
    assert_eq!(st, GxStatus::Ok);
    assert_eq!(unsafe { gx_volterra_param_count(layer) }, 6);
    // [B=1, C=2, H=1, W=3]
    let x = [1.0, -2.0, 0.25, 3.0, 0.5, -1.0];
    let mut y = [0.0; 3];
    let st = unsafe { gx_volterra_forward(layer, x.as_ptr(), 1, 1, 3, y.as_mut_ptr(), y.len()) };
    assert_eq!(st, GxStatus::Ok);
    for p in 0..3 {
        let px = [x[p], x[3 + p]];
        let dot = |w: &[f64; 2]| w[0] * px[0] + w[1] * px[1];
        let want = dot(&w1) + dot(&a) * dot(&b);
        assert!((y[p] - want).abs() < 1e-12, "{p}: {} vs {want}", y[p]);
    }
    let st = unsafe { gx_volterra_forward(layer, x.as_ptr(), 1, 1, 3, y.as_mut_ptr(), 2) };
    assert_eq!(st, GxStatus::Shape);
    assert!(last_error().contains("output length"));
    unsafe { gx_volterra_free(layer) };
}

#[test]
fn zero_and_random_layers() {
    let mut zero = ptr::null_mut();
    assert_eq!(unsafe { gx_volterra_new_zero(3, 2, 3, 2, &mut zero) }, GxStatus::Ok);
    assert_eq!(unsafe { gx_volterra_param_count(zero) }, 2 * 3 * 9 * 5);
    let x = vec![0.7; 3 * 4 * 4];
    let mut y = vec![1.0; 2 * 4 * 4];
    assert_eq!(unsafe { gx_volterra_forward(zero, x.as_ptr(), 1, 4, 4, y.as_mut_ptr(), y.len()) }, GxStatus::Ok);
    assert!(y.iter().all(|&v| v == 0.0));
    unsafe { gx_volterra_free(zero) };

    let run = |seed| {
        let mut l = ptr::null_mut();
        assert_eq!(unsafe { gx_volterra_new_random(3, 2, 3, 2, 0.1, seed, &mut l) }, GxStatus::Ok);
        let mut y = vec![0.0; 2 * 16];
        assert_eq!(unsafe { gx_volterra_forward(l, x.as_ptr(), 1, 4, 4, y.as_mut_ptr(), y.len()) }, GxStatus::Ok);
        unsafe { gx_volterra_free(l) };
        y
    };
    assert_eq!(run(4), run(4));
    assert_ne!(run(4), run(5));
    assert_eq!(unsafe { gx_volterra_param_count(ptr::null()) }, 0);
    unsafe { gx_volterra_free(ptr::null_mut()) };
}

#[test]
fn status_codes() {
    let mut l = ptr::null_mut();
    assert_eq!(unsafe { gx_volterra_new_zero(0, 1, 1, 1, &mut l) }, GxStatus::InvalidArgument);
    assert_eq!(unsafe { gx_volterra_new_zero(1, 1, 1, 1, ptr::null_mut()) }, GxStatus::NullPointer);
    assert!(last_error().contains("out"));
    let w = [1.0; 2];
    assert_eq!(unsafe { gx_volterra_from_weights(1, 1, 1, 1, w.as_ptr(), 2, &mut l) }, GxStatus::Shape);
    let mut y = [0.0];
    assert_eq!(unsafe { gx_volterra_forward(ptr::null(), w.as_ptr(), 1, 1, 1, y.as_mut_ptr(), 1) }, GxStatus::NullPointer);
    let mut s = ptr::null_mut();
    let label = CString::new("cat").unwrap();
    assert_eq!(unsafe { gx_simple_instruction(label.as_ptr(), 7, &mut s) }, GxStatus::InvalidArgument);
    assert_eq!(unsafe { gx_multi_instance_instruction(label.as_ptr(), 2, 9, 0, &mut s) }, GxStatus::InvalidArgument);
    let bad = [0u8; 4];
    let mut out = [0u8; 4];
    assert_eq!(unsafe { gx_dilate(bad.as_ptr(), 2, 2, 2, out.as_mut_ptr()) }, GxStatus::InvalidArgument);
}

#[test]
fn dilation_and_canny() {
    let mut mask = [0u8; 49];
    mask[3 * 7 + 3] = 1;
    let mut out = [0u8; 49];
    assert_eq!(unsafe { gx_dilate(mask.as_ptr(), 7, 7, 3, out.as_mut_ptr()) }, GxStatus::Ok);
    for y in 0..7 {
        for x in 0..7 {
            let inside = (2..=4).contains(&x) && (2..=4).contains(&y);
            assert_eq!(out[y * 7 + x], u8::from(inside), "({x},{y})");
        }
    }
    // A vertical step edge.
    let (w, h) = (16, 16);
    let luma: Vec<f32> = (0..w * h).map(|i| if i % w < 8 { 0.0 } else { 1.0 }).collect();
    let mut edges = vec![0u8; w * h];
    assert_eq!(unsafe { gx_canny(luma.as_ptr(), w, h, 0.1, 0.3, edges.as_mut_ptr()) }, GxStatus::Ok);
    for y in 3..13 {
        let row = &edges[y * w..(y + 1) * w];
        assert!(row[6..10].iter().any(|&e| e == 1), "row {y}: {row:?}");
        assert!(row[..4].iter().all(|&e| e == 0));
    }
    assert_eq!(unsafe { gx_canny(luma.as_ptr(), w, h, 0.3, 0.1, edges.as_mut_ptr()) }, GxStatus::InvalidArgument);
}

#[test]
fn distances() {
    // D = 1, equal means, variances 1 and 4: 1 + 4 - 2·2 = 1.
    let s = std::f64::consts::FRAC_1_SQRT_2;
    let x = [-s, s];
    let y = [-2.0 * s, 2.0 * s];
    let mut d = f64::NAN;
    assert_eq!(unsafe { gx_frechet_distance(x.as_ptr(), 2, y.as_ptr(), 2, 1, &mut d) }, GxStatus::Ok);
    assert!((d - 1.0).abs() < 1e-9, "{d}");
    assert_eq!(unsafe { gx_frechet_distance(x.as_ptr(), 1, y.as_ptr(), 2, 1, &mut d) }, GxStatus::InvalidArgument);

    let a = [0u8; 6];
    let b = [255u8; 6];
    let (mut l1, mut l2) = (0.0, 0.0);
    assert_eq!(unsafe { gx_pixel_distance(a.as_ptr(), b.as_ptr(), 6, &mut l1, &mut l2) }, GxStatus::Ok);
    assert_eq!((l1, l2), (1.0, 1.0));
}

#[test]
fn instruction_strings() {
    let car = CString::new("car").unwrap();
    let apple = CString::new("apple").unwrap();
    let mut s = ptr::null_mut();
    assert_eq!(unsafe { gx_multi_instance_instruction(car.as_ptr(), 2, 1, 0, &mut s) }, GxStatus::Ok);
    assert_eq!(take(s), "remove two cars from the right");
    assert_eq!(unsafe { gx_multi_instance_instruction(apple.as_ptr(), 2, 0, 1, &mut s) }, GxStatus::Ok);
    assert_eq!(take(s), "add two apples");
    assert_eq!(unsafe { gx_simple_instruction(car.as_ptr(), 0, &mut s) }, GxStatus::Ok);
    assert_eq!(take(s), "remove the car");
    unsafe { gx_string_free(ptr::null_mut()) };
}

fn header() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("include/galaxyedit.h")
}

#[test]
fn header_declares_every_export() {
    let h = std::fs::read_to_string(header()).unwrap();
    let src = std::fs::read_to_string(Path::new(env!("CARGO_MANIFEST_DIR")).join("src/lib.rs")).unwrap();
    let exports: Vec<&str> = src
        .lines()
        .filter_map(|l| l.split("extern \"C\" fn ").nth(1))
        .map(|rest| rest.split('(').next().unwrap())
        .collect();
    assert!(exports.len() >= 12, "{exports:?}");
    for f in exports {
        assert!(h.contains(&format!("{f}(")), "{f} missing from header");
    }
    for t in ["typedef struct GxVolterraLayer GxVolterraLayer", "GX_STATUS_OK = 0", "GX_STATUS_PANIC = 8"] {
        assert!(h.contains(t), "{t}");
    }
}

/// Compiles the C smoke program against the header and the shared library.
#[test]
fn c_program_links_and_runs() {
    let exe = std::env::current_exe().unwrap();
    let lib_dir = exe.parent().and_then(Path::parent).unwrap().to_path_buf();
    let so = lib_dir.join("libgalaxyedit_ffi.so");
    assert!(so.exists(), "{} not built", so.display());
    let tmp = tempfile::tempdir().unwrap();
    let bin = tmp.path().join("smoke");
    let dir = Path::new(env!("CARGO_MANIFEST_DIR"));
    let status = std::process::Command::new("cc")
        .arg(dir.join("tests/c/smoke.c"))
        .arg("-I")
        .arg(dir.join("include"))
        .arg("-L")
        .arg(&lib_dir)
        .args(["-lgalaxyedit_ffi", "-lm", "-o"])
        .arg(&bin)
        .status()
        .expect("a C compiler named cc");
    assert!(status.success());
    let out = std::process::Command::new(&bin).env("LD_LIBRARY_PATH", &lib_dir).output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stdout).starts_with("ok "));
}
