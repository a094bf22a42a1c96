use std::path::Path;

use patchcure::cli::run;

fn pcure(args: &[&str]) -> i32 {
    let mut argv = vec!["pcure", "--workers", "1"];
    argv.extend_from_slice(args);
    run(argv)
}

fn p(dir: &Path, name: &str) -> String {
    dir.join(name).to_string_lossy().into_owned()
}

/// Small ViT on 16-px images so the whole pipeline runs in well under a second.
fn build_small(dir: &Path) {
    let code = pcure(&[
        "build",
        "--image",
        "16",
        "--token",
        "4",
        "--depth",
        "2",
        "--dim",
        "8",
        "--hidden",
        "16",
        "--classes",
        "3",
        "--group",
        "4x1",
        "--patch",
        "4",
        "--manifest-out",
        &p(dir, "m.json"),
        "--weights-out",
        &p(dir, "w.pcw"),
    ]);
    assert_eq!(code, 0);
}

#[test]
fn unknown_flag_is_a_config_error() {
    assert_eq!(pcure(&["certify", "--bogus"]), 2);
    assert_eq!(pcure(&["--help"]), 0);
}

#[test]
fn missing_manifest_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let code = pcure(&[
        "certify",
        "--manifest",
        &p(dir.path(), "nope.json"),
        "--weights",
        &p(dir.path(), "nope.pcw"),
        "--synthetic",
        "1",
    ]);
    assert_eq!(code, 2);
}

#[test]
fn corrupted_weights_fail_validation() {
    let dir = tempfile::tempdir().unwrap();
    build_small(dir.path());
    let path = dir.path().join("w.pcw");
    let mut bytes = std::fs::read(&path).unwrap();
    let last = bytes.len() - 1;
    bytes[last] ^= 0x55;
    std::fs::write(&path, bytes).unwrap();
    let code = pcure(&[
        "infer",
        "--manifest",
        &p(dir.path(), "m.json"),
        "--weights",
        &p(dir.path(), "w.pcw"),
        "--synthetic",
        "1",
        "--samples",
        "4",
    ]);
    assert_eq!(code, 3);
}

#[test]
fn oversized_patch_override_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    build_small(dir.path());
    let code = pcure(&[
        "certify",
        "--manifest",
        &p(dir.path(), "m.json"),
        "--weights",
        &p(dir.path(), "w.pcw"),
        "--synthetic",
        "1",
        "--samples",
        "4",
        "--patch",
        "9",
        "--out",
        &p(dir.path(), "r.json"),
    ]);
    assert_eq!(code, 2);
}

#[test]
fn genmask_verify_reports_coverage() {
    let dir = tempfile::tempdir().unwrap();
    let out = p(dir.path(), "masks.json");
    assert_eq!(pcure(&["genmask", "--grid", "6x6", "--patch", "2", "--stride", "2", "--verify", "--out", &out]), 0);
    assert!(std::fs::metadata(&out).unwrap().len() > 0);
    assert_eq!(pcure(&["genmask", "--grid", "6x6", "--patch", "2", "--patches", "2", "--verify"]), 0);
    assert_eq!(pcure(&["genmask", "--grid", "6x6", "--patch", "2", "--stride", "0"]), 2);
}

#[test]
fn bench_sweep_writes_one_row_per_split() {
    let dir = tempfile::tempdir().unwrap();
    build_small(dir.path());
    let csv = p(dir.path(), "sweep.csv");
    let code = pcure(&[
        "bench",
        "--manifest",
        &p(dir.path(), "m.json"),
        "--weights",
        &p(dir.path(), "w.pcw"),
        "--synthetic",
        "2",
        "--samples",
        "16",
        "--k-sweep",
        "0,1,2",
        "--train-synthetic",
        "1",
        "--train-samples",
        "32",
        "--epochs",
        "20",
        "--repeats",
        "3",
        "--batch",
        "8",
        "--csv",
        &csv,
    ]);
    assert_eq!(code, 0);
    let text = std::fs::read_to_string(&csv).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 4, "{text}");
    assert_eq!(lines[0], patchcure::eval::CSV_HEADER);
    for (row, k) in lines[1..].iter().zip(["0", "1", "2"]) {
        assert!(row.split(',').any(|f| f == k), "row {row} lacks k={k}");
    }
}

#[test]
fn sweep_without_training_data_must_match_manifest() {
    let dir = tempfile::tempdir().unwrap();
    build_small(dir.path());
    let code = pcure(&[
        "bench",
        "--manifest",
        &p(dir.path(), "m.json"),
        "--weights",
        &p(dir.path(), "w.pcw"),
        "--synthetic",
        "2",
        "--samples",
        "4",
        "--k-sweep",
        "1",
    ]);
    assert_eq!(code, 2);
}

#[test]
fn probe_and_rfmap_run_on_small_model() {
    let dir = tempfile::tempdir().unwrap();
    build_small(dir.path());
    assert_eq!(pcure(&["rfmap", "--manifest", &p(dir.path(), "m.json")]), 0);
    let code = pcure(&[
        "probe",
        "--manifest",
        &p(dir.path(), "m.json"),
        "--weights",
        &p(dir.path(), "w.pcw"),
        "--synthetic",
        "2",
        "--samples",
        "8",
        "--trials",
        "5",
        "--out",
        &p(dir.path(), "probe.json"),
    ]);
    assert_eq!(code, 0);
}
