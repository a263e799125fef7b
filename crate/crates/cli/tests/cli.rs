use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

const EXPERIMENTS: [&str; 10] = [
    "branch_solve",
    "derivative_check",
    "dpbg",
    "fig2",
    "fig3",
    "morse_scan",
    "sharpness",
    "smbg",
    "stability",
    "tilt_genericity",
];

fn bilevel(root: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bilevel"))
        .args(args)
        .env("BILEVEL_OUTPUT_ROOT", root)
        .env("RUST_LOG", "error")
        .output()
        .expect("binary runs")
}

fn run(root: &Path, sets: &[&str]) -> Output {
    let mut args = vec!["run"];
    for s in sets {
        args.push("--set");
        args.push(s);
    }
    bilevel(root, &args)
}

fn stderr_json(out: &Output) -> Value {
    let text = String::from_utf8_lossy(&out.stderr);
    let line = text.lines().rev().find(|l| l.starts_with('{')).unwrap_or_else(|| panic!("no JSON on stderr: {text}"));
    serde_json::from_str(line).unwrap()
}

fn manifest(dir: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(dir.join("manifest.json")).unwrap()).unwrap()
}

fn last_row(csv: &Path) -> Vec<(String, f64)> {
    let text = std::fs::read_to_string(csv).unwrap();
    let mut lines = text.lines();
    let header: Vec<String> = lines.next().unwrap().split(',').map(String::from).collect();
    let last: Vec<f64> = lines.last().unwrap().split(',').map(|v| v.parse().unwrap()).collect();
    header.into_iter().zip(last).collect()
}

#[test]
fn list_prints_registry_sorted() {
    let tmp = tempfile::tempdir().unwrap();
    let out = bilevel(tmp.path(), &["list"]);
    assert!(out.status.success());
    let names: Vec<String> = String::from_utf8(out.stdout).unwrap().lines().map(|l| l.split_whitespace().next().unwrap().to_string()).collect();
    assert_eq!(names, EXPERIMENTS);
}

#[test]
fn list_params_shows_defaults() {
    let tmp = tempfile::tempdir().unwrap();
    let out = bilevel(tmp.path(), &["list", "--params"]);
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("solver.stop_grad_tol"));
    assert!(text.contains("1000000"));
}

#[test]
fn unknown_experiment_lists_the_registry() {
    let tmp = tempfile::tempdir().unwrap();
    let out = run(tmp.path(), &["experiment=nonesuch"]);
    assert_eq!(out.status.code(), Some(2));
    let err = stderr_json(&out);
    assert_eq!(err["error"], "unknown_experiment");
    assert_eq!(err["registered"].as_array().unwrap().len(), EXPERIMENTS.len());
}

#[test]
fn unknown_keys_are_rejected_by_name() {
    let tmp = tempfile::tempdir().unwrap();
    let out = run(tmp.path(), &["experiment=smbg", "solver.kk=3", "extra=1"]);
    assert_eq!(out.status.code(), Some(2));
    let err = stderr_json(&out);
    assert_eq!(err["error"], "unknown_keys");
    assert_eq!(err["keys"], serde_json::json!(["extra", "solver.kk"]));
    assert!(!tmp.path().join("smbg").exists());
}

#[test]
fn invalid_values_name_the_key() {
    let tmp = tempfile::tempdir().unwrap();
    let out = run(tmp.path(), &["experiment=smbg", "solver.k=-1"]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(stderr_json(&out)["keys"], serde_json::json!(["solver.k"]));
}

#[test]
fn check_materializes_defaults_for_both_formats() {
    let tmp = tempfile::tempdir().unwrap();
    let kv = tmp.path().join("run.cfg");
    std::fs::write(&kv, "# quadratic run\nexperiment = smbg\nsolver.k = 5   # short unroll\ninit.x = 3\n").unwrap();
    let js = tmp.path().join("run.json");
    std::fs::write(&js, r#"{"experiment": "smbg", "solver": {"k": 5}, "init": {"x": [3]}}"#).unwrap();

    let mut resolved = Vec::new();
    for path in [&kv, &js] {
        let out = bilevel(tmp.path(), &["check", path.to_str().unwrap()]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        resolved.push(serde_json::from_slice::<Value>(&out.stdout).unwrap());
    }
    assert_eq!(resolved[0], resolved[1]);
    let r = &resolved[0];
    assert_eq!(r["solver.k"], 5);
    assert_eq!(r["solver.alpha_g"], 0.5);
    assert_eq!(r["solver.stop_grad_tol"], Value::Null);
    assert_eq!(r["init.x"], serde_json::json!([3.0]));
    assert_eq!(r["init.y"], "random");
    assert_eq!(r["output.dir"], "smbg");
}

#[test]
fn smbg_quadratic_reaches_the_minimum() {
    let tmp = tempfile::tempdir().unwrap();
    let out = run(
        tmp.path(),
        &["experiment=smbg", "problem=quadratic_sc", "solver.alpha_f=0.1", "solver.alpha_g=0.5", "solver.k=20", "solver.iterations=500", "init.x=3", "init.y=0"],
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let dir = tmp.path().join("smbg");
    let last = last_row(&dir.join("smbg_trajectory.csv"));
    let phi = last.iter().find(|(c, _)| c == "phi_k").unwrap().1;
    assert!(phi <= 1e-6, "{phi}");
    let m = manifest(&dir);
    assert_eq!(m["experiment"], "smbg");
    assert_eq!(m["status"], "ok");
    assert_eq!(m["artifacts"][0]["file"], "smbg_trajectory.csv");
    assert_eq!(m["artifacts"][0]["rows"], 501);
    assert!(m["resolved_config"]["seed"].is_u64());
    assert!(m["wall_time_seconds"].as_f64().unwrap() >= 0.0);
}

#[test]
fn every_experiment_runs_with_defaults_on_quadratic() {
    let tmp = tempfile::tempdir().unwrap();
    for name in EXPERIMENTS {
        let experiment = format!("experiment={name}");
        let mut sets = vec![experiment.as_str()];
        if !name.starts_with("fig") {
            sets.push("problem=quadratic_sc");
        }
        if name == "stability" {
            // the quadratic minimizer is never left, so every run is censored;
            // a smaller cap keeps the smoke run short
            sets.push("stability.l_max=20000");
        }
        let out = run(tmp.path(), &sets);
        assert!(out.status.success(), "{name}: {}", String::from_utf8_lossy(&out.stderr));
        let dir = tmp.path().join(name);
        let m = manifest(&dir);
        assert_eq!(m["experiment"], name);
        for a in m["artifacts"].as_array().unwrap() {
            let file = dir.join(a["file"].as_str().unwrap());
            let text = std::fs::read_to_string(&file).unwrap();
            assert_eq!(text.lines().count() as u64, a["rows"].as_u64().unwrap() + 1, "{name}");
            assert_eq!(text.lines().next().unwrap().split(',').count(), a["columns"].as_array().unwrap().len());
        }
    }
}

#[test]
fn sharpness_precondition_failure_is_reported_not_fatal() {
    let tmp = tempfile::tempdir().unwrap();
    let out = run(tmp.path(), &["experiment=sharpness", "problem=quadratic_sc"]);
    assert!(out.status.success());
    let dir = tmp.path().join("sharpness");
    let m = manifest(&dir);
    assert_eq!(m["status"], "precondition_failed");
    assert_eq!(m["summary"]["precondition_met"], false);
    assert_eq!(std::fs::read_to_string(dir.join("sharpness_status.csv")).unwrap(), "precondition_met\n0.0\n");
}

#[test]
fn stability_censors_at_the_quadratic_minimizer() {
    let tmp = tempfile::tempdir().unwrap();
    let out = run(tmp.path(), &["experiment=stability", "problem=quadratic_sc", "stability.k_values=2,5", "stability.l_max=5000"]);
    assert!(out.status.success());
    let text = std::fs::read_to_string(tmp.path().join("stability/stability.csv")).unwrap();
    let rows: Vec<&str> = text.lines().skip(1).collect();
    let ks: Vec<&str> = rows.iter().map(|r| r.split(',').next().unwrap()).collect();
    assert_eq!(ks, ["2.0", "5.0"]);
    assert!(rows.iter().all(|r| r.split(',').nth(2) == Some("1.0")), "{text}");
}

#[test]
fn failed_run_keeps_partial_output_and_error_record() {
    let tmp = tempfile::tempdir().unwrap();
    let out = run(
        tmp.path(),
        &[
            "experiment=dpbg",
            "problem=huber_instability",
            "solver.alpha_g=0.1",
            "solver.alpha_f=0.05",
            "solver.k=9",
            "solver.iterations=3000",
            "init.x=0",
            "init.z=-1.5",
        ],
    );
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(stderr_json(&out)["error"], "experiment_failure");
    let dir = tmp.path().join("dpbg");
    assert!(dir.join("error.json").exists());
    assert_eq!(manifest(&dir)["status"], "failed");
    let rows = std::fs::read_to_string(dir.join("dpbg_trajectory.csv")).unwrap().lines().count();
    assert!(rows > 2 && rows < 3002, "{rows}");
}

#[test]
fn figure_artifacts_are_byte_identical_across_runs() {
    let tmp = tempfile::tempdir().unwrap();
    for dir in ["first", "second"] {
        let out_dir = format!("output.dir={dir}");
        assert!(run(tmp.path(), &["experiment=fig2", &out_dir]).status.success());
    }
    for file in ["profile.csv", "dpbg_trace.csv"] {
        let a = std::fs::read(tmp.path().join("first").join(file)).unwrap();
        let b = std::fs::read(tmp.path().join("second").join(file)).unwrap();
        assert!(!a.is_empty());
        assert_eq!(a, b, "{file}");
    }
}

#[test]
fn random_starts_follow_the_seed() {
    let tmp = tempfile::tempdir().unwrap();
    let mut firsts = Vec::new();
    for (dir, seed) in [("a", "7"), ("b", "7"), ("c", "8")] {
        let d = format!("output.dir={dir}");
        let s = format!("seed={seed}");
        assert!(run(tmp.path(), &["experiment=dpbg", "solver.iterations=5", &d, &s]).status.success());
        let text = std::fs::read_to_string(tmp.path().join(dir).join("dpbg_trajectory.csv")).unwrap();
        firsts.push(text.lines().nth(1).unwrap().to_string());
    }
    assert_eq!(firsts[0], firsts[1]);
    assert_ne!(firsts[0], firsts[2]);
}

#[test]
fn missing_config_file_fails_cleanly() {
    let tmp = tempfile::tempdir().unwrap();
    let out = bilevel(tmp.path(), &["run", tmp.path().join("absent.cfg").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(stderr_json(&out)["error"], "io");
}
