mod common;

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn mebn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mebn")).args(args).output().unwrap()
}

fn corpus(rel: &str) -> String {
    common::corpus_dir().join(rel).display().to_string()
}

fn stdout_json(o: &Output) -> Value {
    serde_json::from_slice(&o.stdout).unwrap_or_else(|e| panic!("{e}: {}", String::from_utf8_lossy(&o.stdout)))
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn write_mutation(dir: &Path, name: &str, from: &str, to: &str) -> PathBuf {
    let text = common::theory_text();
    assert!(text.contains(from), "{from}");
    let path = dir.join(name);
    std::fs::write(&path, text.replacen(from, to, 1)).unwrap();
    path
}

#[test]
fn validate_accepts_the_corpus() {
    let o = mebn(&["validate", &corpus("startrek.mtheory")]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let o = mebn(&["validate", "--json", &corpus("startrek.mtheory")]);
    assert_eq!(stdout_json(&o)["ok"], true);
}

#[test]
fn validate_reports_cycles_with_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let p = write_mutation(
        dir.path(),
        "cyclic.mtheory",
        "  graph:\n    OpSpec(st) -> CloakMode(st)",
        "  graph:\n    OpSpec(st) -> CloakMode(st)\n    CloakMode(st) -> OpSpec(st)",
    );
    let o = mebn(&["validate", "--json", p.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    let report = stdout_json(&o);
    assert_eq!(report["ok"], false);
    let conditions: Vec<&str> =
        report["violations"].as_array().unwrap().iter().map(|v| v["condition"].as_str().unwrap()).collect();
    assert!(conditions.contains(&"NoCycles"), "{conditions:?}");
}

#[test]
fn missing_files_exit_3() {
    let o = mebn(&["validate", "/nonexistent/theory.mtheory"]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("/nonexistent/theory.mtheory"));
    assert_eq!(mebn(&["query"]).status.code(), Some(3));
    assert_eq!(mebn(&["--help"]).status.code(), Some(0));
}

#[test]
fn parse_errors_exit_2_with_location() {
    let dir = tempfile::tempdir().unwrap();
    let p = write_mutation(dir.path(), "bad.mtheory", "rv Exists(st: Starship): Bool", "rv Exists(st: Starship: Bool");
    let o = mebn(&["validate", p.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("bad.mtheory:"), "{}", stderr(&o));
}

#[test]
fn unregistered_target_names_the_identifier() {
    let th = corpus("startrek.mtheory");
    let o = mebn(&["query", &th, "--target", "Exists(!ST9)"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("!ST9"), "{}", stderr(&o));
}

#[test]
fn query_prints_posterior_json() {
    let th = corpus("startrek.mtheory");
    let ev = corpus("evidence/encounter.mev");
    let args = ["query", &th, "--evidence", &ev, "--target", "DangerToSelf(!ST0, !T0)"];
    let o = mebn(&args);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let mut a = stdout_json(&o);
    assert_eq!(a["states"], serde_json::json!(["Low", "Medium", "High", "Absurd"]));
    let total: f64 = a["probs"].as_array().unwrap().iter().map(|p| p.as_f64().unwrap()).sum();
    assert!((total - 1.0).abs() < 1e-12);

    // Same output on a second run, apart from the timing field.
    let mut b = stdout_json(&mebn(&args));
    a.as_object_mut().unwrap().remove("elapsed_ms");
    b.as_object_mut().unwrap().remove("elapsed_ms");
    assert_eq!(a, b);

    // The oracle agrees and uses the same state ordering.
    let mut with_oracle = args.to_vec();
    with_oracle.push("--oracle");
    let c = stdout_json(&mebn(&with_oracle));
    assert_eq!(c["states"], a["states"]);
    for (x, y) in a["probs"].as_array().unwrap().iter().zip(c["probs"].as_array().unwrap()) {
        assert!((x.as_f64().unwrap() - y.as_f64().unwrap()).abs() < 1e-9);
    }
}

#[test]
fn several_targets_give_an_array() {
    let th = corpus("startrek.mtheory");
    let o = mebn(&["query", &th, "--target", "Exists(!ST4)", "--target", "CloakMode(!ST1)"]);
    let v = stdout_json(&o);
    let arr = v["targets"].as_array().or_else(|| v.as_array()).expect("array output");
    assert_eq!(arr.len(), 2);
}

#[test]
fn dot_files_are_written() {
    let dir = tempfile::tempdir().unwrap();
    let dot = dir.path().join("ssbn.dot");
    let th = corpus("startrek.mtheory");
    let ev = corpus("evidence/zone.mev");
    let o = mebn(&["ground", &th, "--evidence", &ev, "--target", "ZoneMD(!Z0, !T3)", "--dot", dot.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let text = std::fs::read_to_string(&dot).unwrap();
    assert!(text.starts_with("digraph"));
    assert!(text.matches("ZoneMD(").count() >= 4);

    let o = mebn(&["ground", &th, "--evidence", &ev, "--target", "ZoneMD(!Z0, !T3)"]);
    let j = stdout_json(&o);
    assert!(j["nodes"].as_array().unwrap().len() >= 4);
}

#[test]
fn corpus_runner_passes_and_detects_drift() {
    let o = mebn(&["corpus", &corpus("scenarios")]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stdout));

    // Copy one scenario with a golden value nudged by 1e-6.
    let dir = tempfile::tempdir().unwrap();
    let golden: Value =
        serde_json::from_str(&std::fs::read_to_string(corpus("golden/encounter.json")).unwrap()).unwrap();
    let mut bad = golden.clone();
    let p = &mut bad["posteriors"][0]["probs"][0];
    *p = Value::from(p.as_f64().unwrap() + 1e-6);
    std::fs::write(dir.path().join("encounter.json"), serde_json::to_string(&bad).unwrap()).unwrap();
    let scenario = format!(
        "name = \"encounter\"\ntheory = {:?}\nevidence = {:?}\ntargets = [\"DangerToSelf(!ST0, !T0)\"]\ngolden = \"encounter.json\"\n",
        corpus("startrek.mtheory"),
        corpus("evidence/encounter.mev"),
    );
    std::fs::write(dir.path().join("encounter.toml"), scenario).unwrap();
    let o = mebn(&["corpus", "--json", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(stdout_json(&o)[0]["status"], "fail");
}
