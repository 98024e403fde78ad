use std::path::Path;
use std::process::{Command, Output};

fn pipediag(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pipediag"))
        .args(args)
        .output()
        .expect("spawn pipediag")
}

fn ok(args: &[&str]) {
    let out = pipediag(args);
    assert!(
        out.status.success(),
        "pipediag {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

fn small_config(dir: &Path) -> String {
    let path = dir.join("agent.json");
    std::fs::write(&path, r#"{"n_diag": 60, "n_presc": 30, "seed": 5}"#).unwrap();
    path.to_string_lossy().into_owned()
}

fn read(path: &Path) -> String {
    std::fs::read_to_string(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

#[test]
fn full_workflow_writes_every_artifact() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path());
    let run = tmp.path().join("run");
    let out = run.to_str().unwrap();
    ok(&["simulate", "--config", &cfg, "--out", out]);
    ok(&["diagnose", "--out", out]);
    ok(&["prescribe", "--out", out, "--cascade"]);
    ok(&["report", "--out", out]);
    for f in [
        "manifest.json",
        "tasks_diag.jsonl",
        "episodes_presc.jsonl",
        "sweep.csv",
        "census.json",
        "pools.json",
        "table4.csv",
        "results/popccp_M3.csv",
        "report.txt",
    ] {
        assert!(run.join(f).exists(), "missing {f}");
    }
    let report = read(&run.join("report.txt"));
    assert!(!report.contains("MISSING"), "{report}");
    let manifest: serde_json::Value = serde_json::from_str(&read(&run.join("manifest.json"))).unwrap();
    assert_eq!(manifest["commands"].as_array().unwrap().len(), 4);
}

#[test]
fn default_paradox_runs_without_config() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("p");
    ok(&["paradox", "--out", out.to_str().unwrap()]);
    let v: serde_json::Value = serde_json::from_str(&read(&out.join("paradox.json"))).unwrap();
    assert_eq!(v["diagnosis"]["pop_target"], 3);
}

#[test]
fn missing_config_names_the_path() {
    let tmp = tempfile::tempdir().unwrap();
    let bogus = tmp.path().join("no-such-config.json");
    let out = pipediag(&[
        "simulate",
        "--config",
        bogus.to_str().unwrap(),
        "--out",
        tmp.path().join("r").to_str().unwrap(),
    ]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("no-such-config.json"));
}

#[test]
fn unknown_config_field_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("bad.json");
    std::fs::write(&path, r#"{"kapa": 0.5}"#).unwrap();
    let out = pipediag(&[
        "simulate",
        "--config",
        path.to_str().unwrap(),
        "--out",
        tmp.path().join("r").to_str().unwrap(),
    ]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("kapa"));
}

#[test]
fn same_config_twice_gives_identical_hashes() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path());
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    ok(&["simulate", "--config", &cfg, "--out", a.to_str().unwrap()]);
    ok(&["simulate", "--config", &cfg, "--out", b.to_str().unwrap()]);
    let ma: serde_json::Value = serde_json::from_str(&read(&a.join("manifest.json"))).unwrap();
    let mb: serde_json::Value = serde_json::from_str(&read(&b.join("manifest.json"))).unwrap();
    assert_eq!(ma["config_hash"], mb["config_hash"]);
    assert_eq!(ma["dataset_hashes"], mb["dataset_hashes"]);
    assert_eq!(
        read(&a.join("episodes_diag.jsonl")),
        read(&b.join("episodes_diag.jsonl"))
    );
}

#[test]
fn partial_report_marks_missing_configurations() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path());
    let run = tmp.path().join("run");
    let out = run.to_str().unwrap();
    ok(&["simulate", "--config", &cfg, "--out", out]);
    ok(&["diagnose", "--out", out]);
    ok(&["prescribe", "--out", out, "--configs", "baseline,popccp@M1"]);
    ok(&["report", "--out", out]);
    let report = read(&run.join("report.txt"));
    assert!(report.contains("popccp@M3"), "{report}");
    assert!(report.contains("MISSING"), "{report}");
}

#[test]
fn prescribe_before_diagnose_fails() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path());
    let run = tmp.path().join("run");
    ok(&["simulate", "--config", &cfg, "--out", run.to_str().unwrap()]);
    assert!(!pipediag(&["prescribe", "--out", run.to_str().unwrap()])
        .status
        .success());
}

#[test]
fn report_computes_judge_agreement() {
    let tmp = tempfile::tempdir().unwrap();
    let run = tmp.path().join("run");
    std::fs::create_dir_all(&run).unwrap();
    let a = tmp.path().join("a.csv");
    let b = tmp.path().join("b.csv");
    std::fs::write(
        &a,
        "task_id,configuration_tag,F,sev_1,sev_2\nt1,baseline,0,0,0\nt2,baseline,0,0.3,0.7\nt3,baseline,0,0.95,0\n",
    )
    .unwrap();
    std::fs::write(
        &b,
        "task_id,configuration_tag,F,sev_1,sev_2\nt1,baseline,0,0,0.3\nt2,baseline,0,0.3,0.7\nt3,baseline,0,0.7,0\n",
    )
    .unwrap();
    ok(&[
        "report",
        "--out",
        run.to_str().unwrap(),
        "--judge-a",
        a.to_str().unwrap(),
        "--judge-b",
        b.to_str().unwrap(),
    ]);
    let v: serde_json::Value = serde_json::from_str(&read(&run.join("report.json"))).unwrap();
    assert_eq!(v["judge_agreement"]["n_ratings"], 6);
    assert!(v["judge_agreement"]["krippendorff_alpha"].as_f64().unwrap() > 0.5);
}
