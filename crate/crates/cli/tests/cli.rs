use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn tmflow(args: &[&str], env: &[(&str, &str)]) -> Output {
    let mut c = Command::new(env!("CARGO_BIN_EXE_tmflow"));
    c.args(args).env_remove("TMFLOW_THREADS");
    for (k, v) in env {
        c.env(k, v);
    }
    c.output().unwrap()
}

fn ok(o: &Output) {
    assert!(o.status.success(), "exit {:?}\n{}", o.status.code(), String::from_utf8_lossy(&o.stderr));
}

fn write_config(dir: &Path, name: &str, body: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, body).unwrap();
    p
}

const TORUS: &str = r#"{
  "scenario": "torus",
  "torus": {
    "flow": { "N": 16, "max_time": 0.004, "snapshot_every": 10 },
    "initial": { "preset": "wrap-perturbed", "epsilon": 0.2, "noise": 0.01, "seed": 3 }
  }
}"#;

const COLLAR: &str = r#"{
  "scenario": "collar",
  "collar": { "n_s": 121, "n_theta": 16, "snapshot_every": 200, "initial": { "preset": "bubble", "center": 0.0 } }
}"#;

fn json(p: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(p).unwrap()).unwrap()
}

fn check_schema(name: &str, doc: &Value) {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../docs/schema").join(format!("{name}.schema.json"));
    let schema = json(&path);
    let v = jsonschema::JSONSchema::options().with_draft(jsonschema::Draft::Draft202012).compile(&schema).unwrap();
    let msgs: Vec<String> = match v.validate(doc) {
        Ok(()) => Vec::new(),
        Err(errs) => errs.map(|e| format!("{}: {e}", e.instance_path)).collect(),
    };
    assert!(msgs.is_empty(), "{name}: {msgs:?}");
}

#[test]
fn torus_run_is_byte_identical_and_matches_schema() {
    let d = tempfile::tempdir().unwrap();
    let cfg = write_config(d.path(), "t.json", TORUS);
    let (a, b) = (d.path().join("a"), d.path().join("b"));
    ok(&tmflow(&["run", "--config", cfg.to_str().unwrap(), "--out", a.to_str().unwrap()], &[]));
    ok(&tmflow(&["run", "--config", cfg.to_str().unwrap(), "--out", b.to_str().unwrap()], &[("TMFLOW_THREADS", "1")]));
    for f in ["history.csv", "report.json"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f} differs");
    }
    let report = json(&a.join("report.json"));
    check_schema("torus-run-report", &report);
    assert_eq!(report["schema_version"], 1);
    let snaps = fs::read_dir(a.join("snapshots")).unwrap().count();
    assert_eq!(report["snapshots"].as_u64().unwrap() as usize, snaps);

    let out = d.path().join("an");
    ok(&tmflow(
        &[
            "analyze",
            "--history",
            a.join("history.csv").to_str().unwrap(),
            "--snapshots",
            a.join("snapshots").to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
        ],
        &[],
    ));
    let analysis = json(&out.join("analysis.json"));
    check_schema("analysis-report", &analysis);
    assert_eq!(analysis["domain"], "torus");
    assert!(fs::read_to_string(out.join("oscillation.csv")).unwrap().starts_with("row,coordinate,osc\n"));
}

#[test]
fn collar_run_and_analysis_match_schemas() {
    let d = tempfile::tempdir().unwrap();
    let cfg = write_config(d.path(), "c.json", COLLAR);
    let a = d.path().join("a");
    ok(&tmflow(&["run-collar", "--config", cfg.to_str().unwrap(), "--out", a.to_str().unwrap()], &[]));
    let report = json(&a.join("report.json"));
    check_schema("collar-run-report", &report);
    assert_eq!(report["status"], "pinched");
    assert!(report["min_tension_margin"].as_f64().unwrap() >= -1e-12);
    assert!(fs::read_to_string(a.join("collar.csv")).unwrap().lines().count() > 1);

    let out = d.path().join("an");
    ok(&tmflow(
        &[
            "analyze",
            "--collar",
            "--history",
            a.join("history.csv").to_str().unwrap(),
            "--snapshots",
            a.join("snapshots").to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
        ],
        &[],
    ));
    let analysis = json(&out.join("analysis.json"));
    check_schema("analysis-report", &analysis);
    assert_eq!(analysis["domain"], "collar");
    assert!(analysis["branch"].is_object());
}

#[test]
fn ricci_and_pipeline_reports_match_schemas() {
    let d = tempfile::tempdir().unwrap();
    let cfg = write_config(d.path(), "r.json", r#"{ "scenario": "ricci", "ricci": { "n_phi": 32, "n_theta": 17 } }"#);
    let r = d.path().join("r");
    ok(&tmflow(&["ricci", "--config", cfg.to_str().unwrap(), "--cap", "30", "--out", r.to_str().unwrap()], &[]));
    let report = json(&r.join("ricci_report.json"));
    check_schema("ricci-report", &report);
    assert_eq!(report["cap"], 30.0);

    let p = d.path().join("p");
    ok(&tmflow(&["pipeline", "--config", cfg.to_str().unwrap(), "--out", p.to_str().unwrap()], &[]));
    let report = json(&p.join("pipeline.json"));
    check_schema("pipeline-report", &report);
    assert_eq!(report["events"][0]["kind"], "extinction");
}

#[test]
fn bad_configs_exit_with_two() {
    let d = tempfile::tempdir().unwrap();
    let out = d.path().join("o");
    let bad = write_config(d.path(), "bad.json", r#"{ "scenario": "torus", "torus": { "flow": { "N": 2 } } }"#);
    let o = tmflow(&["run", "--config", bad.to_str().unwrap(), "--out", out.to_str().unwrap()], &[]);
    assert_eq!(o.status.code(), Some(2));
    let garbled = write_config(d.path(), "garbled.json", "{ not json");
    assert_eq!(tmflow(&["run", "--config", garbled.to_str().unwrap()], &[]).status.code(), Some(2));
    let unknown = write_config(d.path(), "unknown.json", r#"{ "scenario": "klein" }"#);
    assert_eq!(tmflow(&["run", "--config", unknown.to_str().unwrap()], &[]).status.code(), Some(2));

    let cfg = write_config(d.path(), "t.json", TORUS);
    let o = tmflow(&["run", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()], &[("TMFLOW_THREADS", "zero")]);
    assert_eq!(o.status.code(), Some(2));
    assert!(!out.exists());
}

#[test]
fn collar_table_prints_csv() {
    let o = tmflow(&["collar-table", "--ell", "0.1,0.5", "--delta", "0.1,0.5"], &[]);
    ok(&o);
    let s = String::from_utf8(o.stdout).unwrap();
    assert_eq!(s.lines().count(), 5);
    assert!(s.lines().next().unwrap().starts_with("ell,"));
}
