use std::fs;
use std::process::{Command, Output};

fn dpsda(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dpsda"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

#[test]
fn run_then_report() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let o = dpsda(&["run", "--out", out, "--epsilon", "inf,1", "--T", "20", "--replicates=2"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let rounds = fs::read_to_string(dir.path().join("rounds.csv")).unwrap();
    assert_eq!(rounds.lines().count(), 1 + 2 * 2 * 20);
    let o = dpsda(&["report", "--out", out]);
    assert_eq!(code(&o), 0);
    assert!(String::from_utf8_lossy(&o.stdout).contains("## Regret"));
    assert!(dir.path().join("report.md").exists());
    assert!(dir.path().join("regret.dat").exists());
}

#[test]
fn config_file_with_flag_override() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    fs::write(&cfg, "# small run\nengine = PS\nT = 15\nreplicates = 1\nepsilon = 0.5\n").unwrap();
    let out = dir.path().join("o");
    let o = dpsda(&[
        "run",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--T",
        "12",
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let written = fs::read_to_string(out.join("config.txt")).unwrap();
    assert!(written.contains("engine = PS"));
    assert!(written.contains("T = 12"));
    assert_eq!(
        fs::read_to_string(out.join("rounds.csv")).unwrap().lines().count(),
        1 + 12
    );
}

#[test]
fn audit_writes_table() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let o = dpsda(&["audit", "--out", out, "--T", "30", "--audit_t0", "25", "--replicates", "2"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let summary = fs::read_to_string(dir.path().join("audit_summary.csv")).unwrap();
    assert_eq!(summary.lines().count(), 5);
}

#[test]
fn bounds_and_check_graph() {
    let o = dpsda(&["bounds", "--T", "20", "--epsilon", "1"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stdout).starts_with("epsilon,engine"));
    let o = dpsda(&["check-graph", "--engine", "PS"]);
    assert_eq!(code(&o), 0);
    let text = String::from_utf8_lossy(&o.stdout);
    assert!(text.contains("window-connected true"));
    assert!(text.contains("directed true"));
}

#[test]
fn disconnected_schedule_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let sched = dir.path().join("bad.txt");
    fs::write(&sched, "n=3 P=1 B=1 directed=0\n0-1\n").unwrap();
    let o = dpsda(&["check-graph", "--schedule", sched.to_str().unwrap()]);
    assert_eq!(code(&o), 2, "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn exit_codes() {
    assert_eq!(code(&dpsda(&["run", "--T", "0"])), 2);
    assert_eq!(code(&dpsda(&["run", "--no_such_key", "1"])), 2);
    assert_eq!(code(&dpsda(&["run", "--engine", "X"])), 2);
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let o = dpsda(&["run", "--out", out, "--problem", "OBC", "--dataset", "/nonexistent/file"]);
    assert_eq!(code(&o), 3);
    assert!(String::from_utf8_lossy(&o.stderr).contains("README"));
    assert_eq!(code(&dpsda(&["report", "--out", out])), 3);
}
