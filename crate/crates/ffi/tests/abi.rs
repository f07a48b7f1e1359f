use std::ffi::{CStr, CString};
use std::ptr;

use rest_ffi::*;

const TINY: &str = "method = rest\nn_train = 100\nn_test = 30\nconflict_ratio = 0.05\ncnn_width = 4\n\
steps = 4\nbatch = 10\neval_every = 2\ntrain_eval_examples = 30\ndensity = 0.3\n";

fn parse(text: &str, strict: i32) -> (RestStatus, *mut RestConfig) {
    let c = CString::new(text).unwrap();
    let mut cfg = ptr::null_mut();
    let status = unsafe { rest_config_parse(c.as_ptr(), strict, &mut cfg) };
    (status, cfg)
}

fn last_error() -> String {
    let p = rest_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_str().unwrap().to_string()
}

#[test]
fn config_errors_map_to_codes_and_messages() {
    let (status, cfg) = parse("method = rest\ndensity = 1.5\n", 1);
    assert_eq!(status, RestStatus::Config);
    assert!(cfg.is_null());
    assert!(last_error().contains("line 2"));

    let (status, _) = parse("methd = rest\nmethod = erm\n", 1);
    assert_eq!(status, RestStatus::Config);
    let (status, cfg) = parse("methd = rest\nmethod = erm\n", 0);
    assert_eq!(status, RestStatus::Ok);
    assert!(rest_last_error().is_null());
    unsafe { rest_config_free(cfg) };

    let mut out = ptr::null_mut();
    assert_eq!(unsafe { rest_config_parse(ptr::null(), 1, &mut out) }, RestStatus::NullArgument);
    let bad = [0xffu8, 0];
    assert_eq!(unsafe { rest_config_parse(bad.as_ptr().cast(), 1, &mut out) }, RestStatus::InvalidUtf8);
}

#[test]
fn run_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let csv = CString::new(dir.path().join("m.csv").to_str().unwrap()).unwrap();
    let (status, cfg) = parse(TINY, 1);
    assert_eq!(status, RestStatus::Ok);
    let seeds = [0u64, 1];
    let mut result = ptr::null_mut();
    let status = unsafe { rest_run(cfg, seeds.as_ptr(), seeds.len(), csv.as_ptr(), &mut result) };
    assert_eq!(status, RestStatus::Ok, "{}", last_error());
    let n = unsafe { rest_run_result_len(result) };
    assert_eq!(n, 4);
    let mut row = RestMetrics::default();
    assert_eq!(unsafe { rest_run_result_row(result, 3, &mut row) }, RestStatus::Ok);
    assert_eq!((row.seed, row.step), (1, 4));
    assert!((0.0..=1.0).contains(&row.unbiased_acc));
    assert!(row.density > 0.0 && row.density < 1.0);
    assert_eq!(unsafe { rest_run_result_row(result, 4, &mut row) }, RestStatus::OutOfRange);
    let text = std::fs::read_to_string(dir.path().join("m.csv")).unwrap();
    assert_eq!(text.lines().count(), 5);
    unsafe {
        rest_run_result_free(result);
        rest_config_free(cfg);
    }
}

#[test]
fn aborted_run_reports_training_status() {
    let dir = tempfile::tempdir().unwrap();
    let csv = CString::new(dir.path().join("x.csv").to_str().unwrap()).unwrap();
    let text = TINY.replace("method = rest", "method = erm").replace("steps = 4", "steps = 20") + "lr = 1e30\n";
    let (_, cfg) = parse(&text, 1);
    let mut result = ptr::null_mut();
    let status = unsafe { rest_run(cfg, [0u64].as_ptr(), 1, csv.as_ptr(), &mut result) };
    assert_eq!(status, RestStatus::TrainingAborted);
    assert!(result.is_null());
    assert!(dir.path().join("x.csv.partial").exists());
    unsafe { rest_config_free(cfg) };
}

#[test]
fn flops_and_gen_data() {
    let (_, cfg) = parse(TINY, 1);
    let mut f = RestFlops::default();
    assert_eq!(unsafe { rest_flops(cfg, &mut f) }, RestStatus::Ok);
    assert!(f.params_active < f.params_total);
    assert!(f.train_flops_per_step < f.dense_train_flops_per_step);

    let dir = tempfile::tempdir().unwrap();
    let d = CString::new(dir.path().to_str().unwrap()).unwrap();
    assert_eq!(unsafe { rest_gen_data(cfg, d.as_ptr()) }, RestStatus::Ok);
    assert!(dir.path().join("train.rstd").exists());
    assert_eq!(unsafe { rest_gen_data(cfg, ptr::null()) }, RestStatus::NullArgument);
    unsafe { rest_config_free(cfg) };
}

#[test]
fn header_declares_the_api() {
    let header = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/include/rest.h")).unwrap();
    for name in ["rest_config_parse", "rest_run", "rest_run_result_row", "rest_flops", "rest_gen_data", "rest_last_error", "REST_STATUS_TRAINING_ABORTED"] {
        assert!(header.contains(name), "{name} missing from header");
    }
}
