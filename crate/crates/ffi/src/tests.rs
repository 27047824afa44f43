use super::*;
use std::ffi::CString;

fn c(s: &str) -> CString {
    CString::new(s).unwrap()
}

fn last_error() -> String {
    unsafe { CStr::from_ptr(nasu_last_error()).to_string_lossy().into_owned() }
}

#[test]
fn version_is_a_static_string() {
    let v = unsafe { CStr::from_ptr(nasu_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

#[test]
fn config_lifecycle_and_key_validation() {
    let cfg = nasu_config_default();
    assert!(!cfg.is_null());

    let status = unsafe { nasu_config_set(cfg, c("search.epochs").as_ptr(), c("3").as_ptr()) };
    assert_eq!(status, NasuStatus::Ok);

    let status = unsafe { nasu_config_set(cfg, c("search.flux_capacitor").as_ptr(), c("1").as_ptr()) };
    assert_eq!(status, NasuStatus::ConfigError);
    assert!(last_error().contains("unknown key"));

    let status = unsafe { nasu_config_apply_paper_faithful(cfg) };
    assert_eq!(status, NasuStatus::Ok);

    unsafe { nasu_config_free(cfg) };
    unsafe { nasu_config_free(std::ptr::null_mut()) }; // null is a no-op
}

#[test]
fn null_arguments_are_rejected_not_crashes() {
    let status = unsafe { nasu_config_set(std::ptr::null_mut(), c("seed").as_ptr(), c("1").as_ptr()) };
    assert_eq!(status, NasuStatus::InvalidArgument);

    let cfg = nasu_config_default();
    let status = unsafe { nasu_run_synth(cfg, std::ptr::null()) };
    assert_eq!(status, NasuStatus::InvalidArgument);
    unsafe { nasu_config_free(cfg) };

    let mut metrics = NasuMetrics { pixel_accuracy: 0.0, miou: 0.0, dsc: 0.0, num_pixels: 0 };
    let status = unsafe { nasu_read_metrics(std::ptr::null(), &mut metrics) };
    assert_eq!(status, NasuStatus::InvalidArgument);
}

#[test]
fn load_missing_config_reports_error() {
    let ptr = unsafe { nasu_config_load(c("/nonexistent/nasu.cfg").as_ptr()) };
    assert!(ptr.is_null());
    assert!(!last_error().is_empty());
}

#[test]
fn synth_search_retrain_through_ffi() {
    let dir = std::env::temp_dir().join(format!("nasu_ffi_{}", std::process::id()));
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).unwrap();
    let dataset = dir.join("dataset");
    let search = dir.join("search");
    let retrain = dir.join("retrain");

    let cfg = nasu_config_default();
    for (key, value) in [
        ("seed", "4".to_string()),
        ("synth.count", "10".into()),
        ("synth.height", "16".into()),
        ("synth.width", "16".into()),
        ("net.depth", "1".into()),
        ("net.base_channels", "4".into()),
        ("net.nodes", "1".into()),
        ("search.epochs", "1".into()),
        ("search.batch_size", "2".into()),
        ("retrain.epochs", "1".into()),
        ("retrain.batch_size", "2".into()),
        ("data.dir", dataset.display().to_string()),
        ("genotype.down", search.join("genotype_down.txt").display().to_string()),
        ("genotype.up", search.join("genotype_up.txt").display().to_string()),
    ] {
        let status = unsafe { nasu_config_set(cfg, c(key).as_ptr(), c(&value).as_ptr()) };
        assert_eq!(status, NasuStatus::Ok, "{key}: {}", last_error());
    }

    let status = unsafe { nasu_run_synth(cfg, c(&dataset.display().to_string()).as_ptr()) };
    assert_eq!(status, NasuStatus::Ok, "synth: {}", last_error());

    let status = unsafe { nasu_run_search(cfg, c(&search.display().to_string()).as_ptr(), std::ptr::null()) };
    assert_eq!(status, NasuStatus::Ok, "search: {}", last_error());
    assert!(search.join("genotype_down.txt").exists());

    let status = unsafe { nasu_run_retrain(cfg, c(&retrain.display().to_string()).as_ptr(), std::ptr::null()) };
    assert_eq!(status, NasuStatus::Ok, "retrain: {}", last_error());

    let mut metrics = NasuMetrics { pixel_accuracy: 0.0, miou: 0.0, dsc: 0.0, num_pixels: 0 };
    let status = unsafe { nasu_read_metrics(c(&retrain.display().to_string()).as_ptr(), &mut metrics) };
    assert_eq!(status, NasuStatus::Ok, "metrics: {}", last_error());
    assert!(metrics.num_pixels > 0);
    assert!((0.0..=1.0).contains(&metrics.miou));

    // a data error surfaces as the matching status
    let bad = nasu_config_default();
    let status = unsafe { nasu_run_search(bad, c(&dir.join("missing").display().to_string()).as_ptr(), std::ptr::null()) };
    assert_eq!(status, NasuStatus::ConfigError); // no data.dir configured
    unsafe { nasu_config_free(bad) };

    unsafe { nasu_config_free(cfg) };
    std::fs::remove_dir_all(&dir).unwrap();
}
