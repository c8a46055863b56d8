use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_heatnet"))
}

fn data(rel: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data").join(rel)
}

fn run(args: &[&str]) -> Output {
    let out = bin().args(args).output().expect("spawn heatnet");
    if !out.status.success() {
        eprintln!("{}", String::from_utf8_lossy(&out.stderr));
    }
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn table(path: &Path) -> (Vec<String>, Vec<Vec<String>>) {
    let text = fs::read_to_string(path).unwrap();
    let mut lines = text.lines();
    let head = lines.next().unwrap().split(',').map(String::from).collect();
    let rows = lines.map(|l| l.split(',').map(String::from).collect()).collect();
    (head, rows)
}

fn short_scenario(dir: &Path, extra: &str) -> PathBuf {
    let p = dir.join("scenario.json");
    fs::write(&p, format!("{{\"te_h\": 12.0, \"dt_s\": 600.0{extra}}}")).unwrap();
    p
}

#[test]
fn missing_network_is_an_input_error() {
    let tmp = TempDir::new().unwrap();
    let out = run(&["simulate", "--network", "/does/not/exist.json", "--out", s(tmp.path())]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("exist.json"));
}

#[test]
fn malformed_scenario_is_an_input_error() {
    let tmp = TempDir::new().unwrap();
    let sc = tmp.path().join("bad.json");
    fs::write(&sc, "{\"dt_s\": ").unwrap();
    let net = data("networks/diamond.json");
    let out = run(&["simulate", "--network", s(&net), "--scenario", s(&sc), "--out", s(tmp.path())]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn simulate_writes_schema_and_is_reproducible() {
    let tmp = TempDir::new().unwrap();
    let sc = short_scenario(tmp.path(), "");
    let net = data("networks/tree.json");
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for dir in [&a, &b] {
        let out = run(&["simulate", "--network", s(&net), "--scenario", s(&sc), "--cells", "3", "--out", s(dir)]);
        assert!(out.status.success());
    }
    for f in ["trajectory.csv", "pressure.csv"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }

    let (head, rows) = table(&a.join("trajectory.csv"));
    assert_eq!(&head[..5], ["t_s", "u_T_J_per_m3", "P_W", "sumG_W", "sumQ_m3_per_s"]);
    assert!(head[5..].iter().all(|h| h.starts_with("y_") && h.ends_with("_J_per_m3")));
    assert_eq!(rows.len(), 12 * 6 + 1);
    // Constant supply at the initial temperature: feed-in equals consumption.
    for r in &rows {
        let (p, g): (f64, f64) = (r[2].parse().unwrap(), r[3].parse().unwrap());
        assert!((p - g).abs() <= 1e-9 * g, "{p} vs {g}");
    }

    let (head, rows) = table(&a.join("pressure.csv"));
    assert_eq!(head, ["t_s", "consumer_id", "dp_Pa", "p_Pa", "u_p_Pa"]);
    assert!(!rows.is_empty());

    let manifest: serde_json::Value = serde_json::from_slice(&fs::read(a.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["command"], "simulate");
    assert_eq!(manifest["inputs"][0]["sha256"].as_str().unwrap().len(), 64);
}

#[test]
fn reduce_logs_a_decreasing_error_and_fails_cleanly_when_budget_runs_out() {
    let tmp = TempDir::new().unwrap();
    let sc = short_scenario(tmp.path(), "");
    let net = data("networks/two_loop.json");
    let archive = tmp.path().join("rom/two_loop.rom.json");
    let out = run(&[
        "reduce",
        "--network",
        s(&net),
        "--training-scenarios",
        s(&sc),
        "--cells",
        "6",
        "--out",
        s(&archive),
    ]);
    assert!(out.status.success());
    assert!(archive.exists());
    assert!(tmp.path().join("rom/two_loop.rom.manifest.json").exists());
    let (head, rows) = table(&tmp.path().join("rom/two_loop.rom.greedy.csv"));
    assert_eq!(head, ["iteration", "picked", "max_error", "dim"]);
    let errs: Vec<f64> = rows.iter().map(|r| r[2].parse().unwrap()).collect();
    assert!(errs.windows(2).all(|w| w[1] <= w[0]), "{errs:?}");
    assert!(*errs.last().unwrap() < 1e-3);

    let out = run(&[
        "reduce",
        "--network",
        s(&net),
        "--training-scenarios",
        s(&sc),
        "--cells",
        "40",
        "--delta",
        "1e-12",
        "--max-iterations",
        "2",
        "--out",
        s(&tmp.path().join("fail.json")),
    ]);
    assert_eq!(out.status.code(), Some(3));
    assert!(!tmp.path().join("fail.json").exists());

    // The archive drives optimize and bench.
    let opt = tmp.path().join("opt");
    let out = run(&[
        "optimize",
        "--network",
        s(&net),
        "--scenario",
        s(&sc),
        "--model",
        s(&archive),
        "--out",
        s(&opt),
    ]);
    assert!(out.status.success());
    let report: serde_json::Value = serde_json::from_slice(&fs::read(opt.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["model"], "rom");

    let bench = tmp.path().join("bench");
    let models = format!("fom,{}", s(&archive));
    let out = run(&[
        "bench",
        "--network",
        s(&net),
        "--scenario",
        s(&sc),
        "--cells",
        "6",
        "--models",
        &models,
        "--repeat",
        "1",
        "--out",
        s(&bench),
    ]);
    assert!(out.status.success());
    let (head, rows) = table(&bench.join("bench.csv"));
    assert_eq!(head, ["model", "kind", "dim", "jacobian_nnz_max", "wall_s", "newton_iterations"]);
    assert_eq!(rows.len(), 2);
    assert_eq!((rows[0][1].as_str(), rows[1][1].as_str()), ("fom", "rom"));
}

#[test]
fn validate_at_the_same_resolution_reproduces_the_optimum() {
    let tmp = TempDir::new().unwrap();
    let sc = short_scenario(tmp.path(), "");
    let net = data("networks/diamond.json");
    let opt = tmp.path().join("opt");
    let out = run(&["optimize", "--network", s(&net), "--scenario", s(&sc), "--cells", "4", "--out", s(&opt)]);
    assert!(out.status.success());
    for f in ["report.json", "control.csv", "pressure_control.csv", "trajectory.csv", "pressure.csv", "manifest.json"] {
        assert!(opt.join(f).exists(), "{f}");
    }
    let (head, _) = table(&opt.join("control.csv"));
    assert_eq!(head, ["t_s", "u_T_J_per_m3", "u_T_C"]);

    let val = tmp.path().join("val");
    let control = opt.join("control.csv");
    let out = run(&[
        "validate",
        "--control-csv",
        s(&control),
        "--network",
        s(&net),
        "--scenario",
        s(&sc),
        "--cells",
        "4",
        "--fine-cells",
        "4",
        "--reference-control-csv",
        s(&control),
        "--out",
        s(&val),
    ]);
    assert!(out.status.success());
    let (head, rows) = table(&val.join("validation.csv"));
    assert_eq!(head, ["control_l2_rel", "feed_in_overshoot_rel", "output_error_rel"]);
    let vals: Vec<f64> = rows[0].iter().map(|v| v.parse().unwrap()).collect();
    assert!(vals[0] == 0.0);
    assert!(vals[1] <= 1e-6, "{}", vals[1]);
    assert!(vals[2] <= 1e-6, "{}", vals[2]);
}

#[test]
fn infeasible_pressure_window_exits_with_diagnostics() {
    let tmp = TempDir::new().unwrap();
    let sc = short_scenario(tmp.path(), ", \"p_min_bar\": 3.5, \"p_max_bar\": 3.51, \"dp_spread_bar\": 0.01");
    let net = data("networks/looped20.json");
    let opt = tmp.path().join("opt");
    let out = run(&["optimize", "--network", s(&net), "--scenario", s(&sc), "--out", s(&opt)]);
    assert_eq!(out.status.code(), Some(4));
    let diag: serde_json::Value = serde_json::from_slice(&fs::read(opt.join("infeasibility.json")).unwrap()).unwrap();
    assert!(diag["max_violation"].as_f64().unwrap() > 0.0);
    assert!(!diag["binding"].as_array().unwrap().is_empty());
}
