use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

fn bin(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_metric-krr"))
        .args(args)
        .env("METRIC_KRR_THREADS", "1")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = bin(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn json_file(p: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(p).unwrap()).unwrap()
}

fn write_samples(dir: &TempDir) -> String {
    let p = dir.path().join("s.json");
    fs::write(
        &p,
        r#"{"dim": 1, "atoms": [
            {"x": [0.0], "y": 1.0, "p": 0.25},
            {"x": [0.5], "y": -0.5, "p": 0.25},
            {"x": [2.0], "y": 0.3, "p": 0.5}
        ]}"#,
    )
    .unwrap();
    p.to_str().unwrap().to_owned()
}

#[test]
fn solve_reports_objective_and_meta() {
    let dir = TempDir::new().unwrap();
    let s = write_samples(&dir);
    let out = dir.path().join("r.json");
    ok(&["solve", "--samples", &s, "--kernel", "gaussian:beta=1", "--lambda", "0.1", "--out", out.to_str().unwrap()]);
    let v = json_file(&out);
    assert!(v["j"].as_f64().unwrap() > 0.0);
    assert_eq!(v["meta"]["tool"], "metric-krr");
    assert_eq!(v["meta"]["threads"], 1);
    assert_eq!(v["meta"]["config"]["command"]["command"], "solve");
    assert!(v["meta"]["wall_time_s"].as_f64().unwrap() >= 0.0);
}

#[test]
fn solve_to_stdout_matches_file_output() {
    let dir = TempDir::new().unwrap();
    let s = write_samples(&dir);
    let out = dir.path().join("r.json");
    let args = ["solve", "--samples", &s, "--kernel", "invpow:alpha=1", "--lambda", "0.2", "--sigma-scalar", "3"];
    let stdout: Value = serde_json::from_slice(&ok(&args).stdout).unwrap();
    let mut with_out = args.to_vec();
    with_out.extend(["--out", out.to_str().unwrap()]);
    ok(&with_out);
    assert!(stdout["j"].is_f64());
    assert_eq!(stdout["j"], json_file(&out)["j"]);
}

#[test]
fn sweep_writes_one_row_per_grid_point() {
    let dir = TempDir::new().unwrap();
    let s = write_samples(&dir);
    let csv = dir.path().join("sweep.csv");
    ok(&["sweep", "--samples", &s, "--kernel", "gaussian:beta=1", "--lambda", "0.1", "--grid", "log:1e-2:1e2:17", "--out", csv.to_str().unwrap()]);
    let mut r = csv::Reader::from_path(&csv).unwrap();
    assert_eq!(r.headers().unwrap(), vec!["t", "j"]);
    let rows: Vec<(f64, f64)> = r.deserialize().map(|x| x.unwrap()).collect();
    assert_eq!(rows.len(), 17);
    assert!((rows[0].0 - 1e-2).abs() < 1e-15 && (rows[16].0 - 1e2).abs() < 1e-10);
    let minima = json_file(&dir.path().join("sweep.csv.minima.json"));
    assert!(minima["minima"].is_array());
    assert!(minima["meta"].is_object());
}

#[test]
fn generated_samples_round_trip_deterministically() {
    let dir = TempDir::new().unwrap();
    let gen = |name: &str| {
        let p = dir.path().join(name);
        ok(&["gen", "multiscale", "--sigmas", "0.5,1", "--centers", "0,2", "--probs", "0.4,0.6", "--n", "64", "--seed", "7", "--out", p.to_str().unwrap()]);
        p
    };
    let a = gen("a.json");
    let b = gen("b.csv");
    assert_eq!(json_file(&a)["atoms"].as_array().unwrap().len(), 64);
    assert_eq!(json_file(&a)["meta"]["seed"], 7);
    assert!(dir.path().join("b.csv.meta.json").exists());
    let solve = |p: &Path| {
        let o = ok(&["solve", "--samples", p.to_str().unwrap(), "--kernel", "gaussian:beta=1", "--lambda", "0.1"]);
        serde_json::from_slice::<Value>(&o.stdout).unwrap()["j"].as_f64().unwrap()
    };
    let (ja, jb) = (solve(&a), solve(&b));
    assert_eq!(ja, solve(&gen("c.json")));
    assert!((ja - jb).abs() <= 1e-14 * ja.abs(), "{ja} vs {jb}");
}

#[test]
fn grad_matches_finite_difference() {
    let dir = TempDir::new().unwrap();
    let s = write_samples(&dir);
    let o = ok(&["grad", "--samples", &s, "--kernel", "gaussian:beta=1", "--lambda", "0.1", "--fd-step", "1e-5"]);
    let v: Value = serde_json::from_slice(&o.stdout).unwrap();
    let g = v["tensor"][0][0].as_f64().unwrap();
    let fd = v["finite_difference"][0][0].as_f64().unwrap();
    assert!((g - fd).abs() < 1e-7, "{g} vs {fd}");
    assert!(v["blocks"].is_null());
}

#[test]
fn invalid_input_exits_with_two() {
    let dir = TempDir::new().unwrap();
    let s = write_samples(&dir);
    let missing = dir.path().join("none.json");
    for args in [
        vec!["solve", "--samples", &s, "--kernel", "gaussian:beta=1", "--lambda", "-1"],
        vec!["solve", "--samples", missing.to_str().unwrap(), "--kernel", "gaussian:beta=1", "--lambda", "0.1"],
        vec!["solve", "--samples", &s, "--kernel", "cauchy:beta=1", "--lambda", "0.1"],
        vec!["solve", "--samples", &s, "--kernel", "gaussian:beta=1", "--lambda", "0.1", "--bogus"],
    ] {
        let out = bin(&args);
        assert_eq!(out.status.code(), Some(2), "{args:?}");
        assert!(!out.stderr.is_empty());
    }
}

#[test]
fn singular_derivative_exits_with_three() {
    let dir = TempDir::new().unwrap();
    let p = dir.path().join("dup.json");
    fs::write(&p, r#"{"dim": 1, "atoms": [{"x": [0.0], "y": 1.0, "p": 0.5}, {"x": [0.0], "y": -1.0, "p": 0.5}]}"#).unwrap();
    let out = bin(&["grad", "--samples", p.to_str().unwrap(), "--kernel", "sobolev:gamma=0.5", "--lambda", "0.1"]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
}
