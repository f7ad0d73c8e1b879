use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use serde_json::Value;

struct Run {
    code: i32,
    stdout: String,
    dir: PathBuf,
}

impl Run {
    fn manifest(&self) -> Value {
        serde_json::from_str(&fs::read_to_string(self.dir.join("manifest.json")).unwrap()).unwrap()
    }

    fn read(&self, name: &str) -> String {
        fs::read_to_string(self.dir.join(name)).unwrap()
    }
}

fn run(tmp: &Path, name: &str, config: &str, extra: &[&str]) -> Run {
    let cfg = tmp.join(format!("{name}.json"));
    fs::write(&cfg, config).unwrap();
    let dir = tmp.join(name);
    let out = Command::new(env!("CARGO_BIN_EXE_quasihom"))
        .arg("--config")
        .arg(&cfg)
        .arg("--output")
        .arg(&dir)
        .args(extra)
        .output()
        .unwrap();
    Run {
        code: out.status.code().unwrap(),
        stdout: String::from_utf8(out.stdout).unwrap(),
        dir,
    }
}

#[test]
fn rational_map_is_rejected_with_its_violator() {
    let tmp = tempfile::tempdir().unwrap();
    let r = run(
        tmp.path(),
        "rational",
        r#"{ "command": "check-map", "params": { "map": { "rows": [[1.0], [2.0]], "grid": 8, "k_max": 4 } } }"#,
        &[],
    );
    assert_eq!(r.code, 2);
    let m = r.manifest();
    assert_eq!(m["exit_code"], 2);
    assert_eq!(m["status"], "validation-error");
    assert!(m["message"].as_str().unwrap().contains("[-2, 1]"));
    let report: Value = serde_json::from_str(&r.read("diophantine.json")).unwrap();
    assert_eq!(report["argmin_k"], serde_json::json!([-2, 1]));
}

#[test]
fn golden_map_passes() {
    let tmp = tempfile::tempdir().unwrap();
    let r = run(
        tmp.path(),
        "golden",
        r#"{ "command": "check-map", "params": { "map": { "preset": "golden", "grid": 8, "k_max": 6 } } }"#,
        &[],
    );
    assert_eq!(r.code, 0);
    assert_eq!(r.manifest()["status"], "ok");
}

#[test]
fn constant_coefficient_tensor_is_reproduced_verbatim() {
    let tmp = tempfile::tempdir().unwrap();
    let r = run(
        tmp.path(),
        "constant",
        r#"{
            "command": "effective-tensor",
            "params": {
                "map": { "preset": "periodic", "n": 2, "grid": 16 },
                "operator": { "preset": "curl2" },
                "coefficient": { "constant": [[2.0, 0.5], [0.5, 1.25]] }
            }
        }"#,
        &["--threads", "1"],
    );
    assert_eq!(r.code, 0);
    assert_eq!(r.read("tensor.csv"), "col0,col1\n2,0.5\n0.5,1.25\n");
}

#[test]
fn verify_1d_reaches_the_homogenized_value() {
    let tmp = tempfile::tempdir().unwrap();
    let r = run(
        tmp.path(),
        "verify",
        r#"{
            "command": "verify-1d",
            "params": {
                "map": { "preset": "golden", "grid": 64 },
                "coefficient": { "trig": { "mean": 2.0, "terms": [ { "k": [1, 0], "sin": 1.0 }, { "k": [0, 1], "cos": 0.5 } ] } },
                "solver": { "tol": 1e-10 }
            }
        }"#,
        &[],
    );
    assert_eq!(r.code, 0);
    assert!(!r.stdout.is_empty());
    let csv = r.read("verify_1d.csv");
    let last = csv.lines().last().unwrap();
    let error: f64 = last.split(',').nth(2).unwrap().parse().unwrap();
    assert!(error <= 1e-3, "final error {error}");
}

#[test]
fn unknown_keys_are_validation_errors() {
    let tmp = tempfile::tempdir().unwrap();
    let r = run(
        tmp.path(),
        "typo",
        r#"{ "command": "check-map", "params": { "map": { "preset": "golden", "kmax": 6 } } }"#,
        &[],
    );
    assert_eq!(r.code, 2);
    let r = run(tmp.path(), "top", r#"{ "command": "check-map", "params": {}, "colour": 1 }"#, &[]);
    assert_eq!(r.code, 2);
}

#[test]
fn single_thread_runs_are_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let config = r#"{
        "command": "fhom-table",
        "params": {
            "map": { "preset": "golden", "grid": 32 },
            "operator": { "preset": "curl1" },
            "coefficient": { "trig": { "mean": 2.0, "terms": [ { "k": [1, 0], "sin": 1.0 } ] } },
            "xis": [[0.0], [1.0], [-0.5]]
        }
    }"#;
    let a = run(tmp.path(), "a", config, &["--threads", "1", "--seed", "7"]);
    let b = run(tmp.path(), "b", config, &["--threads", "1", "--seed", "7"]);
    assert_eq!(a.code, 0);
    assert_eq!(fs::read(a.dir.join("fhom.csv")).unwrap(), fs::read(b.dir.join("fhom.csv")).unwrap());
}

#[test]
fn manifest_records_the_run() {
    let tmp = tempfile::tempdir().unwrap();
    let r = run(
        tmp.path(),
        "cell",
        r#"{
            "command": "solve-cell",
            "params": {
                "map": { "preset": "golden", "grid": 32 },
                "operator": { "preset": "curl1" },
                "coefficient": { "trig": { "mean": 2.0, "terms": [ { "k": [1, 0], "sin": 1.0 } ] } },
                "xi": [1.0]
            },
            "seed": 3
        }"#,
        &["--threads", "2"],
    );
    assert_eq!(r.code, 0);
    let m = r.manifest();
    for key in ["command", "params", "output_dir", "seed", "threads", "status", "exit_code", "outputs", "result", "version"] {
        assert!(!m[key].is_null(), "manifest lacks {key}");
    }
    assert_eq!(m["command"], "solve-cell");
    assert_eq!(m["seed"], 3);
    assert_eq!(m["threads"], 2);
    for f in m["outputs"].as_array().unwrap() {
        assert!(r.dir.join(f.as_str().unwrap()).exists());
    }
}
