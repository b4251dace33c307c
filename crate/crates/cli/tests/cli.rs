use std::path::Path;
use std::process::{Command, Output};

fn harvest(args: &[&str], out_env: Option<&Path>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_harvest"));
    cmd.args(args).env_remove("HARVEST_OUT_DIR");
    if let Some(dir) = out_env {
        cmd.env("HARVEST_OUT_DIR", dir);
    }
    cmd.output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn write_doc(dir: &Path, name: &str, body: &str) -> String {
    let path = dir.join(name);
    std::fs::write(&path, body).unwrap();
    path.to_str().unwrap().to_string()
}

const TWO_STAGE: &str = r#"{
  "pipeline": {"num_stages": 2, "num_micro_batches": 2, "fp_duration": 0.01, "bp_duration": 0.02,
               "num_epochs": 2, "gpu_memory_total": 16},
  "tasks": []
}"#;

#[test]
fn profile_reports_resnet18_estimates() {
    let o = harvest(&["profile", "preset:resnet18"], None);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let doc: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    let task = &doc["tasks"][0];
    assert_eq!(task["task_id"], "resnet18");
    assert_eq!(task["est_per_step_duration"], 30_400);
    assert_eq!(task["est_memory"], 2.63);
}

#[test]
fn unknown_field_is_a_parse_error_with_path() {
    let dir = tempfile::tempdir().unwrap();
    let bad = TWO_STAGE.replace("\"num_epochs\"", "\"epochs_typo\": 1, \"num_epochs\"");
    let path = write_doc(dir.path(), "bad.json", &bad);
    let o = harvest(&["profile", &path], None);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("pipeline"), "{}", stderr(&o));
}

#[test]
fn unknown_preset_is_a_parse_error() {
    assert_eq!(code(&harvest(&["profile", "preset:nope"], None)), 2);
}

#[test]
fn zero_stages_is_infeasible() {
    let dir = tempfile::tempdir().unwrap();
    let path = write_doc(
        dir.path(),
        "p0.json",
        &TWO_STAGE.replace("\"num_stages\": 2", "\"num_stages\": 0"),
    );
    let o = harvest(&["profile", &path], None);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("num_stages"), "{}", stderr(&o));
}

#[test]
fn run_without_tasks_costs_nothing_and_checks_clean() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_doc(dir.path(), "empty.json", TWO_STAGE);
    let out = dir.path().join("out");
    let o = harvest(&["run", &cfg, "--out", out.to_str().unwrap()], None);
    assert_eq!(code(&o), 0, "{}", stderr(&o));

    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    let m = &report["metrics"];
    assert_eq!(m["t_no"], m["t_with"]);
    assert_eq!(m["time_increase"], 0.0);
    assert!(out.join("breakdown.csv").exists());

    for trace in ["trace.jsonl", "baseline.trace.jsonl"] {
        let o = harvest(&["check", out.join(trace).to_str().unwrap()], None);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
    }
}

#[test]
fn out_dir_falls_back_to_environment() {
    let dir = tempfile::tempdir().unwrap();
    let o = harvest(&["run", "preset:resnet18", "--format", "json-lines"], Some(dir.path()));
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(dir.path().join("report.json").exists());
    assert!(dir.path().join("breakdown.jsonl").exists());
}

#[test]
fn tampered_trace_is_an_invariant_violation() {
    let dir = tempfile::tempdir().unwrap();
    let o = harvest(&["run", "preset:resnet18", "--out", dir.path().to_str().unwrap()], None);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let path = dir.path().join("trace.jsonl");
    let text = std::fs::read_to_string(&path).unwrap();
    // Dropping an op record breaks the op count and its dependents.
    let idx = text
        .lines()
        .position(|l| l.starts_with("{\"type\":\"op\""))
        .expect("op record");
    let kept: Vec<&str> = text
        .lines()
        .enumerate()
        .filter(|(i, _)| *i != idx)
        .map(|(_, l)| l)
        .collect();
    std::fs::write(&path, kept.join("\n") + "\n").unwrap();
    let o = harvest(&["check", path.to_str().unwrap()], None);
    assert_eq!(code(&o), 3, "{}", stderr(&o));
}

#[test]
fn sweep_without_grid_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let o = harvest(
        &["sweep", "preset:resnet18", "--out", dir.path().to_str().unwrap()],
        None,
    );
    assert_eq!(code(&o), 1);
}

#[test]
fn microbatch_sweep_writes_table() {
    let dir = tempfile::tempdir().unwrap();
    let o = harvest(
        &[
            "sweep",
            "preset:microbatch-sweep",
            "--out",
            dir.path().to_str().unwrap(),
            "--jobs",
            "2",
        ],
        None,
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let mut rdr = csv::Reader::from_path(dir.path().join("sweep.csv")).unwrap();
    assert_eq!(rdr.records().count(), 2);
    assert!(dir.path().join("sweep.json").exists());
}
