use std::fs;
use std::process::{Command, Output};

fn hgzne(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hgzne")).args(args).output().expect("binary runs")
}

const QUBIT: &str = r#"{"f10_ghz": 5.0, "anharmonicity_mhz": -330.0, "t1_us": 80.0, "t2_us": 90.0, "f0": 0.98, "f1": 0.95}"#;

#[test]
fn ising_rows_on_stdout() {
    let out = hgzne(&["ising", "--circuits", "1", "--depths", "2", "--methods", "exp,hybrid", "--seed", "4"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8(out.stdout).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("experiment,seed,depth,method,k_grid,extrapolated,ideal,abs_error"));
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 2);
    assert!(rows[0].starts_with("ising,") && rows[0].contains(",exp,1;3;5;7;9,"));
}

#[test]
fn out_directory_and_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let run = |sub: &str| {
        let path = dir.path().join(sub);
        let out = hgzne(&["random", "--circuits", "2", "--depths", "2,4", "--seed", "9", "--out", path.to_str().unwrap()]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        path
    };
    let (a, b) = (run("a"), run("b"));
    for f in ["rows.csv", "summary.json", "qq.json"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
    let summary: serde_json::Value = serde_json::from_slice(&fs::read(a.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary.as_array().unwrap().len(), 2 * 5);
}

#[test]
fn fit_file_mode_prints_json() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("data.csv");
    let ys: Vec<String> = [1.0f64, 3.0, 5.0, 7.0, 9.0]
        .iter()
        .map(|k| format!("{k},{}", 0.8 * 0.9f64.powf(*k) + 0.05))
        .collect();
    fs::write(&path, format!("k,y\n{}\n", ys.join("\n"))).unwrap();
    let out = hgzne(&["fit", path.to_str().unwrap(), "--model", "exponential"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    for key in ["model", "params", "bounds_active", "residual", "converged", "extrapolated", "n_starts", "cv"] {
        assert!(v.get(key).is_some(), "missing {key}");
    }
    assert!((v["extrapolated"].as_f64().unwrap() - 0.85).abs() < 1e-6);
}

#[test]
fn config_errors_exit_two() {
    assert_eq!(hgzne(&["ising", "--folds", "1,2,3"]).status.code(), Some(2));
    assert_eq!(hgzne(&["ising", "--methods", "cubic"]).status.code(), Some(2));
    assert_eq!(hgzne(&["ising", "--config", "/nonexistent/cfg.json"]).status.code(), Some(2));
    assert_eq!(hgzne(&["fit", "/nonexistent.csv", "--model", "quartic"]).status.code(), Some(2));

    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    fs::write(&bad, format!(r#"{{"name": "bad", "qubits": [{QUBIT}], "edges": [{{"qubits": [0, 7], "cx_error": 0.01}}]}}"#)).unwrap();
    let out = hgzne(&["ising", "--profile", bad.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("edges[0]"));
}

#[test]
fn campaign_failure_exits_three() {
    // four qubits without couplings: no circuit can be placed
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("isolated.json");
    fs::write(&p, format!(r#"{{"name": "isolated", "qubits": [{QUBIT}, {QUBIT}, {QUBIT}, {QUBIT}]}}"#)).unwrap();
    let out = hgzne(&["ising", "--circuits", "1", "--depths", "2", "--profile", p.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn config_file_is_honoured() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    fs::write(&cfg, r#"{"circuits": 1, "depths": [2], "methods": ["pzne"], "noise": {"kind": "depolarizing", "p": 0.01}}"#).unwrap();
    let out = hgzne(&["ising", "--config", cfg.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8(out.stdout).unwrap();
    assert_eq!(text.lines().count(), 2);
    assert!(text.contains(",pzne,"));
}
