//! End-to-end runs of the binary.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn lab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_filtration-lab"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn write_config(dir: &Path, body: &str) -> String {
    let p = dir.join("run.json");
    fs::write(&p, body).unwrap();
    p.to_string_lossy().into_owned()
}

fn summary(dir: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(dir.join("summary.json")).unwrap()).unwrap()
}

/// Drops every `wall_time` so two runs can be compared.
fn strip_times(v: &mut Value) {
    match v {
        Value::Object(m) => {
            m.remove("wall_time");
            m.values_mut().for_each(strip_times);
        }
        Value::Array(a) => a.iter_mut().for_each(strip_times),
        _ => {}
    }
}

#[test]
fn default_run_passes_and_writes_reports() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("out");
    let o = lab(&["--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stdout));
    let s = summary(&out);
    assert_eq!(s["failed"], 0);
    assert_eq!(s["reports"].as_array().unwrap().len(), 19);
    let csv = fs::read_to_string(out.join("series.csv")).unwrap();
    assert!(csv.starts_with("check,t,estimate,se,zscore"));
}

#[test]
fn fault_injection_passes_only_when_faults_are_caught() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(
        tmp.path(),
        r#"{"suites": ["fault_injection"], "kernels": [{"kind": "randomized", "seed": 5}], "output_dir": "o"}"#,
    );
    let out = tmp.path().join("o");
    let o = lab(&["--config", &cfg, "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0));
    let s = summary(&out);
    let m = &s["reports"][0]["metrics"];
    assert_eq!(m["detected"], m["faults"]);
}

#[test]
fn config_errors_exit_with_two() {
    let tmp = tempfile::tempdir().unwrap();
    let bad_json = write_config(tmp.path(), "{ suites: ");
    assert_eq!(lab(&["--config", &bad_json]).status.code(), Some(2));
    assert_eq!(lab(&["--config", "/nonexistent/run.json"]).status.code(), Some(2));
    let out = tmp.path().join("o");
    assert_eq!(lab(&["--suite", "no_such_check", "--out", out.to_str().unwrap()]).status.code(), Some(2));
    let unseeded = write_config(tmp.path(), r#"{"kernels": [{"kind": "randomized"}]}"#);
    assert_eq!(lab(&["--config", &unseeded]).status.code(), Some(2));
    let tail = write_config(tmp.path(), r#"{"suites": ["mc_weights"], "mc": {"tail_factor": 12.0}}"#);
    assert_eq!(lab(&["--config", &tail, "--out", out.to_str().unwrap()]).status.code(), Some(2));
}

#[test]
fn failing_checks_exit_with_one() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(
        tmp.path(),
        r#"{"suites": ["survival"], "tolerances": {"survival": 0.0}, "kernels": [{"kind": "factor"}]}"#,
    );
    let out = tmp.path().join("o");
    let o = lab(&["--config", &cfg, "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1), "{}", String::from_utf8_lossy(&o.stdout));
}

#[test]
fn reruns_reproduce_the_summary() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(
        tmp.path(),
        r#"{
            "suites": ["conditioning", "prp_progressive", "refine_bracket", "mc_weights", "mc_prp"],
            "kernels": [{"kind": "randomized", "seed": 9}, {"kind": "factor"}],
            "refinement": {"lattice_steps": [8, 16]},
            "mc": {"paths": 3000, "steps": 20, "strides": [10, 5, 1]}
        }"#,
    );
    let runs: Vec<Value> = ["a", "b"]
        .iter()
        .map(|d| {
            let out = tmp.path().join(d);
            let o = lab(&["--config", &cfg, "--out", out.to_str().unwrap(), "--seed", "4"]);
            assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stdout));
            let mut s = summary(&out);
            strip_times(&mut s);
            s["config"].as_object_mut().unwrap().remove("output_dir");
            s
        })
        .collect();
    assert_eq!(runs[0], runs[1]);
    assert_eq!(runs[0]["config"]["mc"]["seed"], 4);
    let csv = fs::read_to_string(tmp.path().join("a/series.csv")).unwrap();
    assert!(csv.lines().any(|l| l.starts_with("mc_prp/prp.unexplained_share,")));
    assert!(csv.lines().any(|l| l.starts_with("mc_weights/base_weight,")));
}

#[test]
fn lists_every_check() {
    let o = lab(&["--list-suites"]);
    assert_eq!(o.status.code(), Some(0));
    let text = String::from_utf8_lossy(&o.stdout);
    for name in ["kernel_validate", "fault_injection", "refine_prp", "mc_antithetic"] {
        assert!(text.lines().any(|l| l == name), "{name}");
    }
}

#[test]
fn shipped_finite_config_passes() {
    let cfg = concat!(env!("CARGO_MANIFEST_DIR"), "/configs/finite.json");
    let tmp = tempfile::tempdir().unwrap();
    let o = lab(&["--config", cfg, "--out", tmp.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stdout));
}
