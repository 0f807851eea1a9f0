use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

use dln_cli::output::content_hash;

const BIN: &str = env!("CARGO_BIN_EXE_dln-lab");

fn dln_lab(args: &[&str]) -> Output {
    Command::new(BIN)
        .args(args)
        .env_remove("DLN_LAB_JOBS")
        .output()
        .expect("binary runs")
}

fn write_config(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p.to_str().unwrap().to_string()
}

fn read_json(path: &Path) -> Value {
    serde_json::from_slice(&fs::read(path).unwrap()).unwrap()
}

const SMALL_RUN: &str = r#"{
  "kind": "run",
  "seed": 5,
  "shape": [3, 6, 6, 3],
  "gamma": 2.0,
  "task": {"type": "low_rank_mc", "n_out": 3, "n_in": 3, "singular_values": [3.0, 1.0], "fraction": 0.8, "seed": 1},
  "flow": {"step_size": 0.02, "max_steps": 4000, "snapshot_every": 20},
  "run": {"max_train_loss": 1e-4}
}"#;

const SMALL_SWEEP: &str = r#"{
  "kind": "figure3",
  "seed": 9,
  "shape": [4, 8, 8, 4],
  "task": {"type": "gaussian_factor_mc", "n_out": 4, "n_in": 4, "rank": 1, "fraction": 0.6, "seed": 2},
  "flow": {"step_size": 0.05, "max_steps": 2000, "snapshot_every": 100},
  "figure3": {"widths": [4, 8], "gammas": [0.75, 1.5], "trials": 2, "eta0": 0.05}
}"#;

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn malformed_json_exits_2_and_writes_nothing() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "bad.json", r#"{"kind": "run", "shape": [2, 2"#);
    let out = tmp.path().join("out");
    let o = dln_lab(&["run", &cfg, "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert!(stderr(&o).contains("line"), "{}", stderr(&o));
    assert!(!out.exists());
}

#[test]
fn invalid_field_is_named() {
    let tmp = TempDir::new().unwrap();
    let text = SMALL_RUN.replace(r#""step_size": 0.02"#, r#""step_size": "fast""#);
    let cfg = write_config(tmp.path(), "c.json", &text);
    let out = tmp.path().join("out");
    let o = dln_lab(&["run", &cfg, "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("flow.step_size"), "{}", stderr(&o));
    assert!(!out.exists());

    let text = SMALL_RUN.replace(r#""gamma": 2.0"#, r#""gamma": 2.0, "sigma": 0.1"#);
    let cfg = write_config(tmp.path(), "c2.json", &text);
    let o = dln_lab(&["validate", &cfg]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("mutually exclusive"), "{}", stderr(&o));
}

#[test]
fn runs_are_byte_identical() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "c.json", SMALL_RUN);
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for dir in [&a, &b] {
        let o = dln_lab(&["run", &cfg, "--out", dir.to_str().unwrap()]);
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
        assert!(stdout(&o).contains("PASS final_train_loss"), "{}", stdout(&o));
    }
    for name in ["trajectory.csv", "summary.json", "manifest.json"] {
        assert_eq!(fs::read(a.join(name)).unwrap(), fs::read(b.join(name)).unwrap(), "{name}");
    }
    let csv = fs::read_to_string(a.join("trajectory.csv")).unwrap();
    assert!(csv.starts_with("step,time,loss_train,loss_test,grad_norm,param_norm,rank,nuclear_norm,balance_defect\n"));
    assert_eq!(csv.lines().count(), 1 + 4000 / 20 + 1);
}

#[test]
fn sweep_output_does_not_depend_on_jobs() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "s.json", SMALL_SWEEP);
    let one = tmp.path().join("one");
    let four = tmp.path().join("four");
    let o = Command::new(BIN)
        .args(["run", &cfg, "--out", one.to_str().unwrap()])
        .env("DLN_LAB_JOBS", "1")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let o = dln_lab(&["run", &cfg, "--out", four.to_str().unwrap(), "--jobs", "4"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let manifest = read_json(&one.join("manifest.json"));
    assert_eq!(manifest, read_json(&four.join("manifest.json")));
    // 2 gammas x 2 widths x 2 trials, plus the point table and summary.
    assert_eq!(manifest["files"].as_array().unwrap().len(), 8 + 2);
}

#[test]
fn manifest_lists_every_file_with_its_hash() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "s.json", SMALL_SWEEP);
    let out = tmp.path().join("out");
    let o = dln_lab(&["run", &cfg, "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let manifest = read_json(&out.join("manifest.json"));
    let listed: Vec<(String, String)> = manifest["files"]
        .as_array()
        .unwrap()
        .iter()
        .map(|f| (f["path"].as_str().unwrap().to_string(), f["sha256"].as_str().unwrap().to_string()))
        .collect();
    let mut on_disk: Vec<String> = fs::read_dir(&out)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .filter(|n| n != "manifest.json")
        .collect();
    on_disk.sort();
    let names: Vec<String> = listed.iter().map(|(n, _)| n.clone()).collect();
    assert_eq!(names, on_disk);
    for (name, hash) in &listed {
        assert_eq!(&content_hash(&fs::read(out.join(name)).unwrap()), hash, "{name}");
    }
    assert_eq!(manifest["versions"]["dln_core"], dln_core::VERSION);
    assert_eq!(manifest["config"]["seed"], 9);
    assert_eq!(manifest["config_hash"].as_str().unwrap().len(), 64);
}

#[test]
fn seed_override_is_recorded() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "c.json", SMALL_RUN);
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    dln_lab(&["run", &cfg, "--out", a.to_str().unwrap()]);
    let o = dln_lab(&["run", &cfg, "--out", b.to_str().unwrap(), "--seed-override", "77"]);
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(read_json(&b.join("manifest.json"))["config"]["seed"], 77);
    assert_ne!(fs::read(a.join("trajectory.csv")).unwrap(), fs::read(b.join("trajectory.csv")).unwrap());
}

#[test]
fn divergence_exits_3_with_partial_outputs() {
    let tmp = TempDir::new().unwrap();
    let text = SMALL_RUN
        .replace(r#""step_size": 0.02"#, r#""step_size": 50.0"#)
        .replace(r#""gamma": 2.0"#, r#""sigma": 1.0"#);
    let cfg = write_config(tmp.path(), "c.json", &text);
    let out = tmp.path().join("out");
    let o = dln_lab(&["run", &cfg, "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    assert!(out.join("trajectory.partial.csv").exists());
    let summary = read_json(&out.join("summary.json"));
    assert_eq!(summary["status"], "error");
    let manifest = read_json(&out.join("manifest.json"));
    let names: Vec<&str> = manifest["files"].as_array().unwrap().iter().map(|f| f["path"].as_str().unwrap()).collect();
    assert_eq!(names, ["summary.json", "trajectory.partial.csv"]);
}

#[test]
fn presets_command_lists_figures() {
    let o = dln_lab(&["presets"]);
    assert_eq!(o.status.code(), Some(0));
    let text = stdout(&o);
    assert!(text.contains("figure1") && text.contains("figure3"));
    assert!(text.contains("100->20"));
    let o = dln_lab(&["preset", "nope"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn figure1_preset_shows_three_plateaus() {
    let tmp = TempDir::new().unwrap();
    let o = dln_lab(&["preset", "figure1"]);
    let cfg = write_config(tmp.path(), "f1.json", &stdout(&o));
    let out = tmp.path().join("out");
    let o = dln_lab(&["run", &cfg, "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let summary = read_json(&out.join("summary.json"));
    assert_eq!(summary["stats"]["plateau_count"], 3);
    assert_eq!(summary["stats"]["rank_sequence"], serde_json::json!([1, 2, 3]));
    assert_eq!(summary["checks_passed"], true);
}
