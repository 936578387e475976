use std::fs;
use std::path::Path;

use mmdg_core::harness::{run, RunConfig};

fn small_run(problem: &str, k: usize, n: usize, out: &Path, cadence: usize) -> mmdg_core::RunOutcome {
    let mut cfg = RunConfig::new(problem, k, n);
    cfg.out = Some(out.to_path_buf());
    cfg.cadence = cadence;
    run(&cfg).expect("run completes")
}

fn data_rows(path: &Path) -> usize {
    fs::read_to_string(path).unwrap().lines().skip(1).filter(|l| !l.is_empty()).count()
}

#[test]
fn cadence_one_writes_every_step() {
    let dir = tempfile::tempdir().unwrap();
    let out = small_run("burgers-smooth", 1, 4, dir.path(), 1);
    let steps = out.summary.steps;
    assert!(steps > 0);
    for s in 0..=steps {
        let p = dir.path().join(format!("solution_{s:06}.csv"));
        assert!(p.exists(), "missing {}", p.display());
        assert_eq!(data_rows(&p), 4);
    }
    assert!(!dir.path().join(format!("solution_{:06}.csv", steps + 1)).exists());
    // One trajectory block of 5 vertices per recorded step.
    assert_eq!(data_rows(&dir.path().join("trajectory.csv")), 5 * (steps + 1));
    let summary: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.path().join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["steps"].as_u64().unwrap() as usize, steps);
}

#[test]
fn reruns_are_byte_identical() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    small_run("sod", 2, 20, a.path(), 7);
    small_run("sod", 2, 20, b.path(), 7);
    for name in ["final.csv", "trajectory.csv", "troubled.csv", "solution_000007.csv"] {
        let x = fs::read(a.path().join(name)).unwrap();
        let y = fs::read(b.path().join(name)).unwrap();
        assert!(x == y, "{name} differs between runs");
    }
}

#[test]
fn norms_do_not_depend_on_cadence() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let x = small_run("burgers-smooth", 2, 10, a.path(), 0);
    let y = small_run("burgers-smooth", 2, 10, b.path(), 3);
    assert_eq!(x.summary.errors, y.summary.errors);
}

/// Minimal reader for legacy ASCII unstructured grids: checks section
/// headers, counts and index ranges.
fn validate_vtk(text: &str) -> Result<(usize, usize), String> {
    let mut lines = text.lines();
    let mut next = || lines.next().ok_or("unexpected end of file").map(str::trim);
    if !next()?.starts_with("# vtk DataFile Version") {
        return Err("bad magic line".into());
    }
    next()?;
    if next()? != "ASCII" {
        return Err("not ASCII".into());
    }
    if next()? != "DATASET UNSTRUCTURED_GRID" {
        return Err("wrong dataset".into());
    }
    let points: Vec<&str> = next()?.split_whitespace().collect();
    if points.len() != 3 || points[0] != "POINTS" {
        return Err("bad POINTS header".into());
    }
    let np: usize = points[1].parse().map_err(|_| "point count")?;
    for _ in 0..np {
        let xyz: Vec<f64> = next()?.split_whitespace().map(|t| t.parse::<f64>()).collect::<Result<_, _>>().map_err(|_| "point coordinate")?;
        if xyz.len() != 3 || xyz.iter().any(|v| !v.is_finite()) {
            return Err("bad point".into());
        }
    }
    let cells: Vec<usize> = next()?.split_whitespace().skip(1).map(|t| t.parse().unwrap()).collect();
    let (nc, size) = (cells[0], cells[1]);
    let mut total = 0;
    for _ in 0..nc {
        let ids: Vec<usize> = next()?.split_whitespace().map(|t| t.parse().unwrap()).collect();
        if ids[0] + 1 != ids.len() || ids[1..].iter().any(|&i| i >= np) {
            return Err("bad cell connectivity".into());
        }
        total += ids.len();
    }
    if total != size {
        return Err(format!("CELLS size {size} but {total} entries"));
    }
    if next()? != format!("CELL_TYPES {nc}") {
        return Err("bad CELL_TYPES header".into());
    }
    for _ in 0..nc {
        if next()? != "5" {
            return Err("expected triangle cells".into());
        }
    }
    if next()? != format!("CELL_DATA {nc}") {
        return Err("bad CELL_DATA header".into());
    }
    let mut fields = 0;
    while let Ok(line) = next() {
        if line.is_empty() {
            continue;
        }
        if !line.starts_with("SCALARS ") || next()? != "LOOKUP_TABLE default" {
            return Err(format!("bad field header `{line}`"));
        }
        for _ in 0..nc {
            next()?.parse::<f64>().map_err(|_| "field value")?;
        }
        fields += 1;
    }
    Ok((nc, fields))
}

#[test]
fn vtk_snapshots_are_well_formed() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = RunConfig::new("euler-2d", 1, 4);
    cfg.t_final = Some(0.05);
    cfg.out = Some(dir.path().to_path_buf());
    cfg.cadence = 2;
    let out = run(&cfg).unwrap();
    let (nc, fields) = validate_vtk(&fs::read_to_string(dir.path().join("final.vtk")).unwrap()).unwrap();
    assert_eq!(nc, out.solution.n_elements());
    assert_eq!(fields, 4);
    validate_vtk(&fs::read_to_string(dir.path().join("solution_000002.vtk")).unwrap()).unwrap();
}

#[test]
fn tiny_wall_budget_stops_before_first_step() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = RunConfig::new("double-mach", 1, 12);
    cfg.out = Some(dir.path().to_path_buf());
    cfg.wall_limit = Some(1e-9);
    let err = run(&cfg).unwrap_err();
    assert!(matches!(err, mmdg_core::Error::Budget { .. }), "{err}");
}

#[test]
fn config_file_round_trip() {
    let mut cfg = RunConfig::new("lax", 2, 100);
    cfg.tau = Some(1e-3);
    cfg.moving = false;
    cfg.sweeps = 30;
    let back = RunConfig::parse(&cfg.to_text()).unwrap();
    assert_eq!(back, cfg);
    assert!(RunConfig::parse("problem = nowhere\nk = 1\nn = 10\n").is_err());
    assert!(RunConfig::parse("problem = lax\nk = 3\nn = 10\n").is_err());
}
