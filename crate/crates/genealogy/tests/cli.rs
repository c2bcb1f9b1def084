use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use genealogy::io::{read_json, ums_from_json, MarkedUmsJson, UmsJson};
use jsonschema::{Resource, Validator};
use serde_json::{json, Value};

const SCHEMAS: [&str; 5] = ["ums", "marked_ums", "genealogy", "report", "run_config"];

fn schema_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("schemas")
}

fn validator(name: &str) -> Validator {
    let load = |n: &str| -> Value {
        let s = std::fs::read_to_string(schema_dir().join(format!("{n}.schema.json"))).unwrap();
        serde_json::from_str(&s).unwrap()
    };
    let mut opts = jsonschema::options();
    for n in SCHEMAS {
        let v = load(n);
        let id = v["$id"].as_str().unwrap().to_string();
        opts = opts.with_resource(id, Resource::from_contents(v).unwrap());
    }
    opts.build(&load(name)).unwrap()
}

fn assert_valid(name: &str, doc: &Value) {
    let v = validator(name);
    let errs: Vec<String> = v.iter_errors(doc).map(|e| format!("{} at {}", e, e.instance_path)).collect();
    assert!(errs.is_empty(), "{name}: {errs:#?}");
}

fn run(dir: &Path, cfg: &Value, extra: &[&str]) -> Output {
    let path = dir.join(format!("cfg{}.json", extra.len()));
    std::fs::write(&path, serde_json::to_string_pretty(cfg).unwrap()).unwrap();
    Command::new(env!("CARGO_BIN_EXE_genealogy")).arg("--config").arg(&path).args(extra).output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited")
}

fn load(path: &Path) -> Value {
    read_json(path).unwrap()
}

#[test]
fn reports_identical_across_thread_counts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = json!({
        "command": "test-moment",
        "seed": 9,
        "replicates": 400,
        "test": {"grid": [[0.5, 0.5]], "critical": []}
    });
    let mut outs = Vec::new();
    for threads in ["1", "3", "1"] {
        let o = run(dir.path(), &cfg, &["--threads", threads]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        outs.push(o.stdout);
    }
    assert_eq!(outs[0], outs[1]);
    assert_eq!(outs[0], outs[2]);
    let report: Value = serde_json::from_slice(&outs[0]).unwrap();
    assert_valid("report", &report);
    assert_eq!(report["seed"], 9);
    assert_eq!(report["rows"][0]["n_replicates"], 400);
}

#[test]
fn simulate_outputs_identical_across_thread_counts() {
    let dir = tempfile::tempdir().unwrap();
    let mut files = Vec::new();
    for threads in ["1", "2"] {
        let out = dir.path().join(format!("t{threads}"));
        let cfg = json!({
            "command": "simulate",
            "seed": 5,
            "replicates": 20,
            "threads": threads.parse::<usize>().unwrap(),
            "out": out,
            "model": {"a": 0.2, "n": 50, "t": 0.5},
            "space": {"kernel": [[0.5, 0.5], [0.5, 0.5]]},
            "specs": [{"n": 2, "phi": "exp_sum", "params": [1.0], "chi": {"sites": [0, 1]}}]
        });
        let o = run(dir.path(), &cfg, &[]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        files
            .push(["mass_paths.csv", "polynomials.csv", "occupation.csv"].map(|f| std::fs::read(out.join(f)).unwrap()));
    }
    assert_eq!(files[0], files[1]);
    let mass = String::from_utf8(files[0][0].clone()).unwrap();
    assert_eq!(mass.lines().next(), Some("replicate,time,mass"));
    assert_eq!(mass.lines().count(), 1 + 20 * 11);
}

#[test]
fn zero_mass_gives_header_only_series() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let cfg = json!({
        "command": "simulate",
        "out": out,
        "initial": {"ceiling": 0.0, "trees": [{"mass": 0.0}]},
        "specs": [{"n": 1, "phi": "constant", "params": [1.0]}]
    });
    let o = run(dir.path(), &cfg, &[]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["mass_paths.csv", "polynomials.csv", "occupation.csv"] {
        let s = std::fs::read_to_string(out.join(f)).unwrap();
        assert_eq!(s.lines().count(), 1, "{f}: {s}");
    }
}

#[test]
fn invalid_configs_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let bad = [
        json!({"command": "simulate", "out": out, "space": {"kernel": [[0.9, 0.2], [0.1, 0.8]]}}),
        json!({"command": "simulate", "out": out, "model": {"b": -1.0}}),
        json!({"command": "simulate", "out": out, "colour": "blue"}),
        json!({"command": "simulate"}),
        json!({"command": "simulate", "out": out, "mode": "path"}),
        json!({"command": "test-moment", "test": {"replicatez": 3}}),
        json!({"command": "walk"}),
    ];
    for cfg in bad {
        let o = run(dir.path(), &cfg, &[]);
        assert_eq!(code(&o), 2, "{cfg}: {}", String::from_utf8_lossy(&o.stderr));
    }
    let o =
        Command::new(env!("CARGO_BIN_EXE_genealogy")).args(["--config", "/nonexistent/config.json"]).output().unwrap();
    assert_eq!(code(&o), 2);
}

#[test]
fn resource_cap_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = json!({"command": "simulate", "out": dir.path().join("out"), "model": {"n": 100, "cap": 5}});
    let o = run(dir.path(), &cfg, &[]);
    assert_eq!(code(&o), 3, "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn failed_test_exits_1_and_writes_report() {
    let dir = tempfile::tempdir().unwrap();
    let report = dir.path().join("report.json");
    let cfg = json!({
        "command": "test-moment",
        "replicates": 200,
        "out": report,
        "thresholds": {"z_max": 1e-9, "rel_tol": 0.0},
        "test": {"grid": [[1.0, 1.0]], "critical": []}
    });
    let o = run(dir.path(), &cfg, &[]);
    assert_eq!(code(&o), 1);
    let r = load(&report);
    assert_valid("report", &r);
    assert_eq!(r["pass"], false);
}

#[test]
fn export_round_trips_and_matches_schemas() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("plain");
    let cfg = json!({"command": "export", "seed": 3, "out": out, "model": {"n": 30, "t": 0.7, "a": 0.5}});
    assert_valid("run_config", &cfg);
    let o = run(dir.path(), &cfg, &[]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let state = load(&out.join("state.json"));
    assert_valid("ums", &state);
    assert_valid("genealogy", &load(&out.join("genealogy.json")));
    let parsed: UmsJson = serde_json::from_value(state.clone()).unwrap();
    let u = ums_from_json(parsed).unwrap();
    assert_eq!(serde_json::to_value(genealogy::io::ums_to_json(&u)).unwrap(), state);

    // The exported state feeds back in as an initial condition.
    let again = json!({"command": "export", "seed": 4, "out": dir.path().join("again"), "initial": state, "model": {"n": 30, "t": 0.2}});
    assert_valid("run_config", &again);
    let o = run(dir.path(), &again, &[]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));

    let out = dir.path().join("path");
    let cfg = json!({
        "command": "export",
        "seed": 3,
        "out": out,
        "mode": "path",
        "model": {"n": 20, "t": 0.5},
        "space": {"kernel": [[0.5, 0.5], [0.5, 0.5]]}
    });
    assert_valid("run_config", &cfg);
    let o = run(dir.path(), &cfg, &[]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let state = load(&out.join("state.json"));
    assert_valid("marked_ums", &state);
    assert_valid("genealogy", &load(&out.join("genealogy.json")));
    let parsed: MarkedUmsJson = serde_json::from_value(state.clone()).unwrap();
    let m = genealogy::io::marked_from_json(parsed).unwrap();
    assert_eq!(serde_json::to_value(genealogy::io::marked_to_json(&m)).unwrap(), state);
}

#[test]
fn shipped_configs_match_schema() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("configs");
    let mut n = 0;
    for entry in std::fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        let cfg = load(&path);
        assert_valid("run_config", &cfg);
        genealogy::config::read_config(&path).unwrap();
        n += 1;
    }
    assert!(n >= 8);
}

#[test]
fn reports_of_every_test_match_schema() {
    let dir = tempfile::tempdir().unwrap();
    let cfgs = [
        json!({"command": "test-algebra", "replicates": 20}),
        json!({"command": "test-monotone", "replicates": 5}),
        json!({"command": "test-calibration", "replicates": 200}),
        json!({"command": "test-duality", "replicates": 200}),
        json!({"command": "test-branching", "replicates": 200, "test": {"models": ["location"]}}),
    ];
    for cfg in cfgs {
        assert_valid("run_config", &cfg);
        let o = run(dir.path(), &cfg, &[]);
        assert!(matches!(code(&o), 0 | 1), "{cfg}: {}", String::from_utf8_lossy(&o.stderr));
        let r: Value = serde_json::from_slice(&o.stdout).unwrap();
        assert_valid("report", &r);
        assert_eq!(r["test"], cfg["command"]);
    }
}

#[test]
fn schemas_reject_malformed_documents() {
    let ums = validator("ums");
    assert!(ums.is_valid(&json!({"ceiling": 1.0, "trees": [{"h": 0.5, "children": [{"mass": 1.0}]}]})));
    assert!(!ums.is_valid(&json!({"ceiling": 1.0, "trees": [{"h": 0.5}]})));
    assert!(!ums.is_valid(&json!({"ceiling": 1.0, "trees": [{"mass": -1.0}]})));
    let marked = validator("marked_ums");
    assert!(!marked.is_valid(&json!({"mode": "location", "ceiling": 0.0, "trees": [{"atoms": [{"mass": 1.0}]}]})));
    let cfg = validator("run_config");
    assert!(!cfg.is_valid(&json!({"command": "simulate", "model": {"n": 0}})));
    assert!(!cfg.is_valid(&json!({"command": "simulate", "specs": [{"n": 1, "phi": "sine", "params": []}]})));
}
