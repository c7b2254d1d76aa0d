use std::ffi::{CStr, CString};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::ptr;

use deltakv_ffi::*;

fn last_error() -> String {
    let p = dkv_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

fn engine(json: Option<&str>) -> *mut DkvEngine {
    let cfg = json.map(|j| CString::new(j).unwrap());
    let mut h = ptr::null_mut();
    let rc = unsafe { dkv_engine_new(cfg.as_ref().map_or(ptr::null(), |c| c.as_ptr()), &mut h) };
    assert_eq!(rc, DKV_OK, "{}", last_error());
    h
}

#[test]
fn engine_lifecycle() {
    let h = engine(None);
    let mut vocab = 0usize;
    assert_eq!(unsafe { dkv_engine_vocab(h, &mut vocab) }, DKV_OK);
    let mut logits = vec![0f32; vocab];
    let prompt: Vec<u32> = (0..40).map(|i| (i * 7 % vocab) as u32).collect();
    let rc = unsafe { dkv_engine_prefill(h, prompt.as_ptr(), prompt.len(), 8, logits.as_mut_ptr(), logits.len()) };
    assert_eq!(rc, DKV_OK, "{}", last_error());
    assert!(logits.iter().all(|x| x.is_finite()));
    assert_eq!(unsafe { dkv_engine_decode(h, 3, logits.as_mut_ptr(), logits.len()) }, DKV_OK);
    let mut len = 0usize;
    assert_eq!(unsafe { dkv_engine_len(h, &mut len) }, DKV_OK);
    assert_eq!(len, 41);

    let mut report = ptr::null_mut();
    assert_eq!(unsafe { dkv_engine_memory_report(h, &mut report) }, DKV_OK);
    let json: serde_json::Value = serde_json::from_str(unsafe { CStr::from_ptr(report) }.to_str().unwrap()).unwrap();
    assert_eq!(json["tokens"], 41);
    unsafe { dkv_string_free(report) };

    assert_eq!(unsafe { dkv_engine_reset(h) }, DKV_OK);
    assert_eq!(unsafe { dkv_engine_len(h, &mut len) }, DKV_OK);
    assert_eq!(len, 0);
    unsafe { dkv_engine_free(h) };
}

#[test]
fn error_codes() {
    let mut h = ptr::null_mut();
    let bad = CString::new("{not json").unwrap();
    assert_eq!(unsafe { dkv_engine_new(bad.as_ptr(), &mut h) }, DKV_ERR_INPUT);
    assert!(h.is_null());
    let cfg = CString::new(r#"{"controller": {"filter_layers": [2]}}"#).unwrap();
    assert_eq!(unsafe { dkv_engine_new(cfg.as_ptr(), &mut h) }, DKV_ERR_CONFIG);
    assert!(last_error().contains("filter"));
    assert_eq!(unsafe { dkv_engine_new(ptr::null(), ptr::null_mut()) }, DKV_ERR_NULL);
    assert_eq!(unsafe { dkv_engine_len(ptr::null_mut(), &mut 0) }, DKV_ERR_NULL);

    let h = engine(None);
    let mut small = [0f32; 2];
    let toks = [1u32, 2, 3];
    assert_eq!(unsafe { dkv_engine_prefill(h, toks.as_ptr(), 3, 3, small.as_mut_ptr(), 2) }, DKV_ERR_BUFFER);
    assert_eq!(unsafe { dkv_engine_decode(h, u32::MAX, ptr::null_mut(), 0) }, DKV_ERR_INPUT);
    unsafe { dkv_engine_free(h) };
    unsafe { dkv_engine_free(ptr::null_mut()) };
}

#[test]
fn budget_ratios() {
    let mut r = DkvBudgetRatios::default();
    assert_eq!(unsafe { dkv_budget_ratios(5, 32, 10, 0.25, 1.0, 0.3, &mut r) }, DKV_OK);
    assert!((r.kr - 0.4515625).abs() < 1e-12);
    assert!((r.cr - (5.0 / 32.0 + 27.0 / 32.0 * 0.3)).abs() < 1e-12);
    assert_eq!(unsafe { dkv_budget_ratios(5, 4, 10, 0.25, 1.0, 0.3, &mut r) }, DKV_ERR_CONFIG);
}

#[test]
fn quantizer_round_trip() {
    for d in [7usize, 8] {
        let z: Vec<f32> = (0..d).map(|i| (i as f32 - 3.0) * 0.37).collect();
        let n = dkv_quantized_bytes(d);
        assert_eq!(n, d.div_ceil(2) + 8);
        let mut bytes = vec![0u8; n];
        assert_eq!(unsafe { dkv_quantize(z.as_ptr(), d, bytes.as_mut_ptr(), n) }, DKV_OK);
        let mut back = vec![0f32; d];
        assert_eq!(unsafe { dkv_dequantize(bytes.as_ptr(), n, d, back.as_mut_ptr()) }, DKV_OK);
        let scale = (z[d - 1] - z[0]) / 15.0;
        for (a, b) in z.iter().zip(&back) {
            assert!((a - b).abs() <= scale / 2.0 + 1e-6, "{a} vs {b}");
        }
        assert_eq!(unsafe { dkv_dequantize(bytes.as_ptr(), n - 1, d, back.as_mut_ptr()) }, DKV_ERR_SHAPE);
    }
}

fn target_dir() -> PathBuf {
    // tests run from target/<profile>/deps
    std::env::current_exe().unwrap().parent().unwrap().parent().unwrap().to_path_buf()
}

#[test]
fn c_program_links_against_header() {
    let crate_dir = Path::new(env!("CARGO_MANIFEST_DIR"));
    let lib = target_dir().join("libdeltakv_ffi.a");
    assert!(lib.exists(), "static library missing at {}", lib.display());
    let out = tempfile::tempdir().unwrap();
    let exe = out.path().join("smoke");
    let status = Command::new("cc")
        .arg(crate_dir.join("tests/smoke.c"))
        .arg("-I")
        .arg(crate_dir.join("include"))
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&exe)
        .status()
        .expect("C compiler");
    assert!(status.success());
    let run = Command::new(&exe).output().unwrap();
    assert!(run.status.success(), "{}", String::from_utf8_lossy(&run.stderr));
    assert_eq!(String::from_utf8_lossy(&run.stdout).trim(), "ok");
}
