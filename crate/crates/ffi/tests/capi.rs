//! Drives the C ABI exactly as a C caller would: raw pointers, status codes,
//! thread-local error text.

use std::ffi::{CStr, CString};
use std::ptr;

use nestedformer_ffi::*;

fn last_error() -> String {
    let mut buf = vec![0 as std::ffi::c_char; 256];
    let n = unsafe { nf_last_error(buf.as_mut_ptr(), buf.len()) };
    assert!(n > 0);
    unsafe { CStr::from_ptr(buf.as_ptr()) }.to_string_lossy().into_owned()
}

fn toy() -> *mut NfModel {
    let mut m = ptr::null_mut();
    assert_eq!(unsafe { nf_model_build_toy(2, 3, 16, 16, 16, 0, &mut m) }, NfStatus::Ok);
    assert!(!m.is_null());
    m
}

#[test]
fn version_is_a_c_string() {
    let v = unsafe { CStr::from_ptr(nf_version()) }.to_str().unwrap();
    assert_eq!(v, env!("CARGO_PKG_VERSION"));
}

#[test]
fn build_forward_save_load_round_trip() {
    let m = toy();
    let mut shape = [0u32; 5];
    assert_eq!(unsafe { nf_model_shape(m, shape.as_mut_ptr()) }, NfStatus::Ok);
    assert_eq!(shape, [2, 16, 16, 16, 3]);
    let mut count = 0u64;
    assert_eq!(unsafe { nf_model_param_count(m, &mut count) }, NfStatus::Ok);
    assert!(count > 0);

    let n = 16 * 16 * 16;
    let input: Vec<f32> = (0..2 * n).map(|i| (i % 17) as f32 / 8.0 - 1.0).collect();
    let mut a = vec![0f32; n * 3];
    let status = unsafe { nf_model_forward(m, input.as_ptr(), input.len(), a.as_mut_ptr(), a.len()) };
    assert_eq!(status, NfStatus::Ok);
    assert!(a.iter().all(|v| v.is_finite()));

    let dir = tempfile::tempdir().unwrap();
    let path = CString::new(dir.path().join("m.nfck").to_str().unwrap()).unwrap();
    assert_eq!(unsafe { nf_model_save(m, path.as_ptr()) }, NfStatus::Ok);
    let mut loaded = ptr::null_mut();
    assert_eq!(unsafe { nf_model_load(path.as_ptr(), &mut loaded) }, NfStatus::Ok);
    let mut b = vec![0f32; n * 3];
    unsafe { nf_model_forward(loaded, input.as_ptr(), input.len(), b.as_mut_ptr(), b.len()) };
    assert_eq!(a, b);
    unsafe {
        nf_model_free(m);
        nf_model_free(loaded);
        nf_model_free(ptr::null_mut());
    }
}

#[test]
fn errors_carry_codes_and_messages() {
    let mut m = ptr::null_mut();
    assert_eq!(
        unsafe { nf_model_build_toy(2, 3, 24, 16, 16, 0, &mut m) },
        NfStatus::InvalidArgument
    );
    assert!(m.is_null());
    assert!(!last_error().is_empty());

    let m = toy();
    let input = [0f32; 10];
    let mut out = vec![0f32; 10];
    let status = unsafe { nf_model_forward(m, input.as_ptr(), input.len(), out.as_mut_ptr(), out.len()) };
    assert_eq!(status, NfStatus::Dimension);
    assert!(last_error().contains("expected"));
    unsafe { nf_model_free(m) };

    let missing = CString::new("/nonexistent/model.nfck").unwrap();
    let mut h = ptr::null_mut();
    assert_eq!(unsafe { nf_model_load(missing.as_ptr(), &mut h) }, NfStatus::Io);
    assert_eq!(
        unsafe { nf_model_param_count(ptr::null(), &mut 0) },
        NfStatus::NullPointer
    );

    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.nfck");
    std::fs::write(&bad, b"NOPE").unwrap();
    let bad = CString::new(bad.to_str().unwrap()).unwrap();
    assert_eq!(unsafe { nf_model_load(bad.as_ptr(), &mut h) }, NfStatus::Format);
}

#[test]
fn json_config_builds() {
    let cfg = CString::new(r#"{"modalities": 1, "classes": 2, "extents": [16, 16, 16], "encoder": {"stage_channels": [2, 2, 4, 4, 8]}, "level_channels": [8, 4, 4, 2], "tokens": 2, "attention": {"window": [1, 1, 1], "heads": 2, "qkv_dim": 8}}"#).unwrap();
    let mut m = ptr::null_mut();
    assert_eq!(
        unsafe { nf_model_build_json(cfg.as_ptr(), &mut m) },
        NfStatus::Ok,
        "{}",
        last_error()
    );
    unsafe { nf_model_free(m) };
    let bad = CString::new(r#"{"no_such_field": 1}"#).unwrap();
    assert_eq!(
        unsafe { nf_model_build_json(bad.as_ptr(), &mut m) },
        NfStatus::InvalidArgument
    );
}

#[test]
fn attention_cost_and_metrics() {
    let (grid, window) = ([8u32; 3], [2u32; 3]);
    let (mut full, mut tsa) = (0u64, 0u64);
    unsafe {
        assert_eq!(
            nf_attention_cost(grid.as_ptr(), window.as_ptr(), false, &mut full),
            NfStatus::Ok
        );
        assert_eq!(
            nf_attention_cost(grid.as_ptr(), window.as_ptr(), true, &mut tsa),
            NfStatus::Ok
        );
    }
    assert_eq!((full, tsa), (262_144, 40_960));
    let bad = [3u32; 3];
    assert_ne!(
        unsafe { nf_attention_cost(grid.as_ptr(), bad.as_ptr(), true, &mut tsa) },
        NfStatus::Ok
    );

    let ext = [1u32, 1, 4];
    let pred = [1u8, 1, 0, 0];
    let gt = [1u8, 0, 0, 0];
    let spacing = [1.0f64; 3];
    let (mut d, mut h) = (0.0, 0.0);
    unsafe {
        assert_eq!(
            nf_dice(pred.as_ptr(), gt.as_ptr(), ext.as_ptr(), 1, &mut d),
            NfStatus::Ok
        );
        assert_eq!(
            nf_hd95(pred.as_ptr(), gt.as_ptr(), ext.as_ptr(), 1, spacing.as_ptr(), &mut h),
            NfStatus::Ok
        );
    }
    assert!((d - 2.0 / 3.0).abs() < 1e-12);
    assert!(h > 0.0 && h <= 1.0);
    let empty = [0u8; 4];
    unsafe { nf_hd95(pred.as_ptr(), empty.as_ptr(), ext.as_ptr(), 1, spacing.as_ptr(), &mut h) };
    assert!(h.is_infinite());
}
