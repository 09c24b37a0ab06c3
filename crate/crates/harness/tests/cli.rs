use std::process::Command;

fn groundloc() -> Command {
    Command::new(env!("CARGO_BIN_EXE_groundloc"))
}

#[test]
fn unknown_axis_fails_with_one_line_diagnostic() {
    let dir = tempfile::tempdir().unwrap();
    let out = groundloc()
        .args(["gen-world", "--count", "1", "--out"])
        .arg(dir.path().join("w"))
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let out = groundloc()
        .args(["jitter-sweep", "--axis", "sideways", "--levels", "0", "--scenarios"])
        .arg(dir.path().join("w"))
        .arg("--out")
        .arg(dir.path().join("s.csv"))
        .output()
        .unwrap();
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("sideways"), "{err}");
}

#[test]
fn missing_corpus_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let out = groundloc()
        .args(["eval-loc", "--identity", "--scenarios"])
        .arg(dir.path().join("absent"))
        .arg("--out")
        .arg(dir.path().join("e.csv"))
        .output()
        .unwrap();
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.starts_with("error: "), "{err}");
    assert_eq!(err.trim_end().lines().count(), 1, "{err}");
}

#[test]
fn grad_check_passes() {
    let out = groundloc().arg("grad-check").output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn bench_writes_expected_columns() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("b.csv");
    let out = groundloc()
        .args(["bench", "--configs", "identity", "--sizes", "96", "--reps", "3", "--out"])
        .arg(&csv)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = std::fs::read_to_string(&csv).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap(), "config,path,size,median_ms,p90_ms");
    assert!(lines.count() >= 1);
}
