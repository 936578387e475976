use std::process::{Command, Output};

fn mmdg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mmdg")).args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn list_shows_the_catalog() {
    let o = mmdg(&["list"]);
    assert_eq!(o.status.code(), Some(0));
    let text = stdout(&o);
    for name in ["burgers-smooth", "sod", "double-mach", "forward-step"] {
        assert!(text.contains(name), "{name} missing from\n{text}");
    }
}

#[test]
fn successful_run_writes_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let o = mmdg(&["run", "--problem", "burgers-smooth", "--k", "1", "--n", "20", "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("space-time"));
    for f in ["config.txt", "final.csv", "summary.json", "trajectory.csv", "troubled.csv"] {
        assert!(out.join(f).exists(), "{f} not written");
    }
}

#[test]
fn config_file_and_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("sod.cfg");
    std::fs::write(&cfg, "problem = sod\nk = 1\nn = 20\nmoving = false\ntfinal = 0.1\n").unwrap();
    let o = mmdg(&["run", "--config", cfg.to_str().unwrap(), "--n", "24", "--set", "sweeps=5"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("n=24 moving=false"));
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(mmdg(&["run", "--problem", "no-such-problem"]).status.code(), Some(1));
    assert_eq!(mmdg(&["run", "--bogus"]).status.code(), Some(1));
    assert_eq!(mmdg(&["run", "--problem", "sod", "--k", "5"]).status.code(), Some(1));
    assert_eq!(mmdg(&["run", "--problem", "sod", "--set", "nonsense"]).status.code(), Some(1));
    assert_eq!(mmdg(&["convergence", "--problem", "burgers-smooth", "--ns", "10,20"]).status.code(), Some(1));
    assert_eq!(mmdg(&["--help"]).status.code(), Some(0));
}

#[test]
fn numerical_failures_exit_two() {
    // Exceeding the wall-clock budget is reported as a numerical failure.
    let o = mmdg(&["run", "--problem", "double-mach", "--n", "12", "--set", "wall_limit=1e-9"]);
    assert_eq!(o.status.code(), Some(2), "{}", String::from_utf8_lossy(&o.stderr));
    // The limited projection of the blast-wave data turns inadmissible within a few steps.
    let o = mmdg(&["run", "--problem", "blast-wave", "--k", "1", "--moving", "false"]);
    assert_eq!(o.status.code(), Some(2), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stderr).contains("inadmissible"));
}

#[test]
fn convergence_table_and_csv() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("table.csv");
    let o = mmdg(&["convergence", "--problem", "burgers-smooth", "--k", "1", "--ns", "10,20,40", "--csv", csv.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let text = stdout(&o);
    assert!(text.contains("order"));
    let rows = std::fs::read_to_string(&csv).unwrap();
    assert_eq!(rows.lines().count(), 4);
    assert!(rows.starts_with("N,L1,order_L1"));
}

#[test]
fn reference_is_cached() {
    let dir = tempfile::tempdir().unwrap();
    let args = ["reference", "--problem", "sod", "--n", "50", "--k", "1", "--dir", dir.path().to_str().unwrap()];
    let first = mmdg(&args);
    assert_eq!(first.status.code(), Some(0), "{}", String::from_utf8_lossy(&first.stderr));
    let file = dir.path().join("sod_n50_k1.csv");
    let stamp = std::fs::metadata(&file).unwrap().modified().unwrap();
    let second = mmdg(&args);
    assert_eq!(stdout(&first), stdout(&second));
    assert_eq!(std::fs::metadata(&file).unwrap().modified().unwrap(), stamp);
}
