use std::path::PathBuf;
use std::process::{Command, Output};

fn ttnmpc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ttnmpc")).args(args).output().unwrap()
}

fn configs() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

#[test]
fn run_then_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("nominal");
    let cfg = configs().join("nominal.toml");
    let run = ttnmpc(&["run", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap(), "--seed", "9", "--duration", "12"]);
    assert!(run.status.success(), "{}", String::from_utf8_lossy(&run.stderr));
    for f in ["log.csv", "path.csv", "slip_schedule.csv", "metrics.txt"] {
        assert!(out.join(f).exists(), "{f}");
    }
    let log = std::fs::read_to_string(out.join("log.csv")).unwrap();
    assert_eq!(log.lines().count(), 1 + 60);

    let m = ttnmpc(&["metrics", "--log", out.join("log.csv").to_str().unwrap()]);
    assert!(m.status.success());
    let text = String::from_utf8(m.stdout).unwrap();
    assert!(text.contains("cycles            60"));
    assert!(text.contains("combined"));
}

#[test]
fn dropout_schedule_flag() {
    let dir = tempfile::tempdir().unwrap();
    let sched = dir.path().join("gaps.csv");
    std::fs::write(&sched, "t_start_s,t_end_s\n1.0,1.6\n").unwrap();
    let out = dir.path().join("run");
    let run = ttnmpc(&[
        "run",
        "--out",
        out.to_str().unwrap(),
        "--duration",
        "4",
        "--dropout-schedule",
        sched.to_str().unwrap(),
    ]);
    assert!(run.status.success(), "{}", String::from_utf8_lossy(&run.stderr));
    let log = std::fs::read_to_string(out.join("log.csv")).unwrap();
    let masked = log.lines().skip(1).filter(|l| l.split(',').nth(27) == Some("1")).count();
    assert_eq!(masked, 3);
}

#[test]
fn selftest_passes() {
    let out = ttnmpc(&["selftest"]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    assert_eq!(text.lines().filter(|l| l.starts_with("PASS")).count(), 5);
}

#[test]
fn bad_config_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "duration = 3\n").unwrap();
    let out = ttnmpc(&["run", "--config", cfg.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("error"));
}
