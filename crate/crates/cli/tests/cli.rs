use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::{json, Value};

fn pilotwave(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pilotwave")).current_dir(dir).args(args).output().expect("binary runs")
}

fn write_config(dir: &Path, name: &str, v: &Value) -> String {
    fs::write(dir.join(name), serde_json::to_vec_pretty(v).unwrap()).unwrap();
    name.to_string()
}

fn small_relax(extra: impl FnOnce(&mut Value)) -> Value {
    let mut v = json!({
        "seed": 4,
        "output_dir": "out",
        "state": {"kind": "random_phase", "side": 2},
        "times": [0.0, 1.0],
        "grids": [{"half_width": 3.0, "fine_cells": 40, "coarse_cell": 0.6},
                  {"half_width": 3.0, "fine_cells": 20, "coarse_cell": 0.6}],
        "snapshots": false
    });
    extra(&mut v);
    v
}

fn read_csv(path: &Path) -> Vec<Vec<f64>> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| l.split(',').map(|x| x.parse().unwrap()).collect())
        .collect()
}

#[test]
fn missing_config_exits_2_and_writes_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let out = pilotwave(dir.path(), &["cmb", "--config", "absent.json"]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 0);
}

#[test]
fn unknown_key_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.json", &json!({"seed": 1, "output_dir": "out", "ls": [2], "extra": 1}));
    let out = pilotwave(dir.path(), &["cosmic-variance", "--config", &cfg]);
    assert_eq!(out.status.code(), Some(2));
    assert!(!dir.path().join("out").exists());
}

#[test]
fn notes_are_accepted() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "c.json",
        &json!({"_note": "small", "seed": 1, "output_dir": "out", "ls": [2], "realizations": 200}),
    );
    let out = pilotwave(dir.path(), &["cosmic-variance", "--config", &cfg]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let run: Value = serde_json::from_slice(&fs::read(dir.path().join("out/run.json")).unwrap()).unwrap();
    assert_eq!(run["subcommand"], "cosmic-variance");
    assert_eq!(run["seed"], 1);
    assert_eq!(run["artifacts"], json!(["cv.csv"]));
}

#[test]
fn invalid_values_are_config_errors() {
    let dir = tempfile::tempdir().unwrap();
    let bad = [
        ("relax", small_relax(|v| v["initial_density"] = json!({"kind": "gaussian", "width": -1.0}))),
        ("relax", small_relax(|v| v["times"] = json!([1.0, 0.5]))),
        ("cmb", json!({"seed": 1, "spectrum": {"amplitude": 1.0}, "transfer": {"kind": "box", "k1": 2.0, "k2": 1.0},
                       "l_min": 2, "l_max": 3})),
        ("cmb", json!({"seed": 1, "spectrum": {"amplitude": 1.0}, "transfer": {"kind": "box", "k1": 1.0, "k2": 2.0},
                       "l_min": 0, "l_max": 3})),
        ("typicality", json!({"seed": 1, "n": 10})),
    ];
    for (i, (cmd, v)) in bad.iter().enumerate() {
        let cfg = write_config(dir.path(), &format!("c{i}.json"), v);
        let out = pilotwave(dir.path(), &[cmd, "--config", &cfg]);
        assert_eq!(out.status.code(), Some(2), "{cmd} {v}");
    }
    assert!(!dir.path().join("output").exists());
}

#[test]
fn integrator_exhaustion_is_a_numerical_failure() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.json", &small_relax(|v| v["integrator"] = json!({"max_steps": 1})));
    let out = pilotwave(dir.path(), &["relax", "--config", &cfg]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(!dir.path().join("out").exists());
}

#[test]
fn fit_on_too_few_points_is_a_numerical_failure() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("h.csv"), "t,hbar,err\n0,1,0\n1,0.5,0\n2,0.3,0\n").unwrap();
    let cfg = write_config(dir.path(), "c.json", &json!({"seed": 1, "output_dir": "out", "input": "h.csv"}));
    let out = pilotwave(dir.path(), &["fit", "--config", &cfg]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn fit_recovers_an_exact_decay() {
    let dir = tempfile::tempdir().unwrap();
    let (h0, b, c) = (0.8, 1.1, 0.02);
    let mut text = String::from("t,hbar,err\n");
    for i in 0..12 {
        let t = i as f64 * 2.0;
        text += &format!("{t},{},0\n", h0 * (-b * t / (2.0 * std::f64::consts::PI)).exp() + c);
    }
    fs::write(dir.path().join("h.csv"), text).unwrap();
    let cfg = write_config(dir.path(), "c.json", &json!({"seed": 1, "output_dir": "out", "input": "h.csv"}));
    let out = pilotwave(dir.path(), &["fit", "--config", &cfg]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let fit: Value = serde_json::from_slice(&fs::read(dir.path().join("out/fit.json")).unwrap()).unwrap();
    assert!((fit["H0"].as_f64().unwrap() - h0).abs() < 1e-6);
    assert!((fit["b"].as_f64().unwrap() - b).abs() < 1e-6);
    assert!((fit["c"].as_f64().unwrap() - c).abs() < 1e-6);
}

#[test]
fn relax_writes_curve_and_snapshots() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.json", &small_relax(|v| v["snapshots"] = json!(true)));
    let out = pilotwave(dir.path(), &["relax", "--config", &cfg]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let rows = read_csv(&dir.path().join("out/hcurve.csv"));
    assert_eq!(rows.len(), 2);
    assert!(rows.iter().all(|r| r[1] >= -r[2] && r[2] >= 0.0));
    for name in ["convergence.csv", "rho_000.bin", "psi2_001.bin", "run.json"] {
        assert!(dir.path().join("out").join(name).exists(), "{name}");
    }
    assert!(!dir.path().join("out/fit.json").exists(), "two points cannot be fitted");
}

#[test]
fn box_transfer_ratio_is_the_mean_deficit() {
    let dir = tempfile::tempdir().unwrap();
    let e = std::f64::consts::E;
    let cfg = write_config(
        dir.path(),
        "c.json",
        &json!({
            "seed": 1, "output_dir": "out",
            "spectrum": {"amplitude": 2.0 * std::f64::consts::PI.powi(2), "n_s": 1.0,
                         "deficit": {"c1": 10.0, "c2": 0.0, "c3": 1.0}},
            "transfer": {"kind": "box", "k1": 1.0, "k2": e},
            "l_min": 2, "l_max": 30
        }),
    );
    let out = pilotwave(dir.path(), &["cmb", "--config", &cfg]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    // the box weights ln k uniformly, so the ratio is the mean of xi over ln k in [0, 1]
    let n = 200_000;
    let xi = |k: f64| (10.0 * k / std::f64::consts::PI).atan() - std::f64::consts::FRAC_PI_2 + 1.0;
    let mean = (0..n).map(|i| xi(((i as f64 + 0.5) / n as f64).exp())).sum::<f64>() / n as f64;
    let rows = read_csv(&dir.path().join("out/cl.csv"));
    assert_eq!(rows.len(), 29);
    for r in rows {
        assert!((r[1] - 1.0).abs() < 1e-8, "{r:?}");
        assert!((r[3] - mean).abs() < 1e-6, "{r:?} vs {mean}");
    }
}

#[test]
fn typicality_report_lists_every_pair() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "c.json",
        &json!({"seed": 2, "output_dir": "out", "n": 20000, "exponents": [2.0, 4.0],
                "nesting": {"first": {"levels": [0], "coeffs": [[1.0, 0.0]]},
                            "second": {"levels": [1], "coeffs": [[1.0, 0.0]]}, "n": 20000}}),
    );
    let out = pilotwave(dir.path(), &["typicality", "--config", &cfg]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let rows = read_csv(&dir.path().join("out/typicality.csv"));
    assert_eq!(rows.len(), 4);
    let kl = |p: f64, q: f64| rows.iter().find(|r| r[1] == p && r[2] == q).unwrap()[3];
    assert!(kl(2.0, 2.0) < kl(2.0, 4.0));
    assert!(kl(4.0, 4.0) < kl(4.0, 2.0));
    let report = fs::read_to_string(dir.path().join("out/report.txt")).unwrap();
    assert!(report.contains("|Psi|^4"));
    assert_eq!(read_csv(&dir.path().join("out/nesting.csv")).len(), 2);
}

#[test]
fn zero_threads_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.json", &json!({"seed": 1, "ls": [2], "realizations": 100}));
    let out = pilotwave(dir.path(), &["cosmic-variance", "--threads", "0", "--config", &cfg]);
    assert_eq!(out.status.code(), Some(2));
}
