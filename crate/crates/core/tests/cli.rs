use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use auxq::metrics::MetricsRow;

fn blobs_config() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/blobs.json")
}

fn auxq(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_auxq")).args(args).env("RUST_LOG", "warn").output().unwrap()
}

fn ok(out: &Output) -> String {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout.clone()).unwrap()
}

/// Pretrains on blobs and quantizes with the baseline method, returning both checkpoints.
fn checkpoints(dir: &Path) -> (PathBuf, PathBuf) {
    let cfg = blobs_config();
    let d = dir.to_str().unwrap();
    let pre = PathBuf::from(ok(&auxq(&["pretrain", "--config", cfg.to_str().unwrap(), "--out", d])).trim());
    let fine = ok(&auxq(&["finetune", "--config", cfg.to_str().unwrap(), "--init", pre.to_str().unwrap(), "--out", d]));
    (pre, PathBuf::from(fine.trim()))
}

#[test]
fn pretrain_finetune_inspect_eval() {
    let dir = tempfile::tempdir().unwrap();
    let (pre, fine) = checkpoints(dir.path());
    assert!(dir.path().join("pretrain_metrics.csv").exists());
    assert!(dir.path().join("finetune_baseline_metrics.json").exists());

    let text = ok(&auxq(&["inspect", pre.to_str().unwrap()]));
    assert!(text.contains("stage=pretrain"), "{text}");
    assert!(!text.contains("UniformK"), "{text}");

    let text = ok(&auxq(&["inspect", fine.to_str().unwrap()]));
    assert!(text.contains("interior=UniformK(2)"), "{text}");
    assert!(text.contains("last_layer=UniformK(8)"), "{text}");
    assert!(text.contains("first_layer=UniformK(8)"), "{text}");

    let cfg = blobs_config();
    let line = ok(&auxq(&["eval", "--config", cfg.to_str().unwrap(), "--checkpoint", fine.to_str().unwrap()]));
    let row: MetricsRow = serde_json::from_str(line.trim()).unwrap();
    assert!((0.0..=1.0).contains(&row.top1));
    let again: MetricsRow = serde_json::from_str(
        ok(&auxq(&["eval", "--config", cfg.to_str().unwrap(), "--checkpoint", fine.to_str().unwrap()])).trim(),
    )
    .unwrap();
    assert_eq!((row.loss, row.top1), (again.loss, again.top1));
}

#[test]
fn compare_writes_one_row_per_cell() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = blobs_config();
    let out = auxq(&[
        "compare",
        "--config",
        cfg.to_str().unwrap(),
        "--methods",
        "baseline,auxi",
        "--seeds",
        "5",
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    ok(&out);
    let csv = std::fs::read_to_string(dir.path().join("comparison.csv")).unwrap();
    assert_eq!(csv.lines().count(), 11, "{csv}");
}

#[test]
fn auxi_without_aux_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let (pre, _) = checkpoints(dir.path());
    let cfg = blobs_config();
    let out =
        auxq(&["finetune", "--config", cfg.to_str().unwrap(), "--init", pre.to_str().unwrap(), "--method", "auxi"]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("requires --aux"), "{err}");
}

#[test]
fn unknown_flag_and_missing_config() {
    assert_eq!(auxq(&["pretrain", "--bogus"]).status.code(), Some(2));
    let out = auxq(&["pretrain", "--config", "/nonexistent/config.json"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("\"error\""));
}

#[test]
fn export_curves_round_trips_metrics() {
    let dir = tempfile::tempdir().unwrap();
    checkpoints(dir.path());
    let json = dir.path().join("pretrain_metrics.json");
    let target = dir.path().join("curves.csv");
    ok(&auxq(&["export-curves", "--input", json.to_str().unwrap(), "--output", target.to_str().unwrap()]));
    assert_eq!(
        std::fs::read_to_string(target).unwrap(),
        std::fs::read_to_string(dir.path().join("pretrain_metrics.csv")).unwrap()
    );
}
