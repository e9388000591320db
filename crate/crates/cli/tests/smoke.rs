use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_strata");

fn tiny_config() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/tiny.toml")
}

fn strata(out: &Path, args: &[&str]) -> Output {
    Command::new(BIN).arg("--out").arg(out).args(args).env("RUST_LOG", "warn").output().expect("binary runs")
}

fn ok(out: &Path, args: &[&str]) {
    let o = strata(out, args);
    assert!(o.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&o.stderr));
}

fn pipeline(out: &Path) {
    let cfg = tiny_config();
    ok(out, &["--config", cfg.to_str().unwrap(), "gen-data"]);
    for stage in ["train-tokenizer", "train-top", "train-bottom"] {
        ok(out, &[stage]);
    }
    ok(out, &["eval", "--per-class", "4"]);
}

fn is_ppm(path: &Path) -> bool {
    let bytes = std::fs::read(path).unwrap();
    let text = String::from_utf8_lossy(&bytes[..bytes.len().min(32)]).to_string();
    let mut parts = text.split_ascii_whitespace();
    let magic = parts.next();
    let (w, h): (usize, usize) = (parts.next().unwrap().parse().unwrap(), parts.next().unwrap().parse().unwrap());
    magic == Some("P6") && parts.next() == Some("255") && bytes.len() >= 3 * w * h
}

#[test]
fn tiny_pipeline_end_to_end() {
    let tmp = tempfile::tempdir().unwrap();
    let run = tmp.path().join("run");
    pipeline(&run);
    ok(&run, &["sample", "--n", "2", "--trace"]);
    let sheet = run.join("samples/class_00.ppm");
    assert!(is_ppm(&sheet));
    assert!(run.join("samples/audit_class_00.csv").exists());

    let input = run.join("data/val/00000.ppm");
    let input = input.to_str().unwrap();
    ok(&run, &["inpaint", "--input", input, "--region", "16,0,32,32", "--class", "1"]);
    ok(&run, &["transfer", "--input", input, "--target-class", "3"]);
    assert!(is_ppm(&run.join("edit/inpaint.ppm")) && is_ppm(&run.join("edit/transfer.ppm")));

    let o = strata(&run, &["ablate-schedule", "--samples", "12"]);
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(std::fs::read_to_string(run.join("ablate-schedule/report.csv")).unwrap().lines().count(), 8);
    let o = strata(&run, &["ablate-steps", "--samples", "12"]);
    assert!(matches!(o.status.code(), Some(0 | 2)));
    assert_eq!(std::fs::read_to_string(run.join("ablate-steps/report.csv")).unwrap().lines().count(), 8);
}

#[test]
fn missing_tokenizer_is_a_prerequisite_error() {
    let tmp = tempfile::tempdir().unwrap();
    let run = tmp.path().join("run");
    ok(&run, &["--config", tiny_config().to_str().unwrap(), "gen-data"]);
    let o = strata(&run, &["train-top"]);
    assert_eq!(o.status.code(), Some(1));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("tokenizer.ckpt"), "{err}");
    assert!(!run.join("top.ckpt").exists());
}

#[test]
fn identical_seed_and_config_give_identical_metrics() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    pipeline(&a);
    pipeline(&b);
    let report = |d: &Path| std::fs::read_to_string(d.join("eval/report.csv")).unwrap();
    assert_eq!(report(&a), report(&b));
    assert!(report(&a).lines().count() > 2);
}

#[test]
fn failed_assertion_exits_two_and_keeps_the_report() {
    let tmp = tempfile::tempdir().unwrap();
    let run = tmp.path().join("run");
    ok(&run, &["--config", tiny_config().to_str().unwrap(), "gen-data"]);
    let o = strata(&run, &["ablate-fusion", "--seeds", "0"]);
    let csv = std::fs::read_to_string(run.join("ablate-fusion/report.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
    let summary = std::fs::read_to_string(run.join("ablate-fusion/summary.txt")).unwrap();
    let passed = summary.contains("check: PASS");
    assert_eq!(o.status.code(), Some(if passed { 0 } else { 2 }));
}

#[test]
fn usage_errors_exit_one() {
    let tmp = tempfile::tempdir().unwrap();
    for args in [&["--bogus"][..], &["sample", "--n", "x"], &["no-such-command"], &["--steps-top", "0", "sample"], &["--schedule", "zigzag", "sample"]] {
        assert_eq!(strata(tmp.path(), args).status.code(), Some(1), "{args:?}");
    }
    assert_eq!(strata(tmp.path(), &["--help"]).status.code(), Some(0));
}
