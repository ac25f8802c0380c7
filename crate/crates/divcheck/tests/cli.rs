//! Black-box tests of the binary: exit codes, JSON shape, env overrides.

use std::io::Write;
use std::path::PathBuf;
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_divcheck"))
}

fn corpus(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("corpus").join(name)
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn check_exit_codes() {
    let ok = run(&["check", corpus("prog2.dvt").to_str().unwrap(), "--user", "u"]);
    assert_eq!(ok.status.code(), Some(0), "{}", stdout(&ok));
    assert!(stdout(&ok).starts_with("ACCEPT"));
    let bad = run(&["check", corpus("prog4.dvt").to_str().unwrap(), "--user", "u"]);
    assert_eq!(bad.status.code(), Some(1));
    assert!(stdout(&bad).starts_with("REJECT"));
}

#[test]
fn check_json_output() {
    let out = run(&["--json", "check", corpus("shop_ok.dvt").to_str().unwrap(), "--user", "u"]);
    assert_eq!(out.status.code(), Some(0));
    let v: serde_json::Value = serde_json::from_str(&stdout(&out)).unwrap();
    assert_eq!(v["accepted"], serde_json::json!(true));
    assert!(v["labels"].as_array().is_some());
}

#[test]
fn syntax_error_exits_2() {
    let mut f = tempfile::NamedTempFile::new().unwrap();
    writeln!(f, "@Table@ t(v: int)\nx <- SELECT FROM;").unwrap();
    let out = run(&["check", f.path().to_str().unwrap(), "--user", "u"]);
    assert_eq!(out.status.code(), Some(2));
    // in JSON mode the error is a machine-readable object on stdout
    let out = run(&["--json", "check", f.path().to_str().unwrap(), "--user", "u"]);
    assert_eq!(out.status.code(), Some(2));
    let v: serde_json::Value = serde_json::from_str(&stdout(&out)).unwrap();
    assert!(v["error"].is_string());
}

#[test]
fn missing_file_exits_2() {
    let out = run(&["check", "/nonexistent/file.dvt", "--user", "u"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn analyze_prints_dependencies() {
    let out = run(&["analyze", corpus("prog3.dvt").to_str().unwrap(), "--user", "u"]);
    assert_eq!(out.status.code(), Some(0));
    let text = stdout(&out);
    assert!(text.contains('x') && text.contains("QL[u]"), "{text}");
    let out = run(&["--json", "analyze", corpus("prog4.dvt").to_str().unwrap(), "--user", "u"]);
    let v: serde_json::Value = serde_json::from_str(&stdout(&out)).unwrap();
    assert_eq!(v["ql"].as_array().unwrap().len(), 3); // {q1}, {q2}, {q1,q2}
}

#[test]
fn interpret_runs_and_taints() {
    let mut db = tempfile::NamedTempFile::new().unwrap();
    writeln!(db, r#"{{"emp": [["alice", "CEO", 100]]}}"#).unwrap();
    let prog = corpus("prog2.dvt");
    let out = run(&[
        "interpret",
        prog.to_str().unwrap(),
        "--db",
        db.path().to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", stdout(&out));
    // y is 0, so the else branch runs and outputs the CEO row
    assert!(stdout(&out).contains("CEO"), "{}", stdout(&out));
    let out = run(&[
        "--json",
        "interpret",
        prog.to_str().unwrap(),
        "--db",
        db.path().to_str().unwrap(),
        "--taint",
        "--user",
        "u",
    ]);
    let v: serde_json::Value = serde_json::from_str(&stdout(&out)).unwrap();
    let queries = v["queries"].as_array().unwrap();
    assert_eq!(queries.len(), 1);
    assert!(queries[0].as_str().unwrap().contains("CEO"));
}

#[test]
fn interpret_divide_by_zero_exits_2() {
    let mut f = tempfile::NamedTempFile::new().unwrap();
    writeln!(f, "out(1 div 0, u);").unwrap();
    let mut db = tempfile::NamedTempFile::new().unwrap();
    writeln!(db, "{{}}").unwrap();
    let out = run(&[
        "interpret",
        f.path().to_str().unwrap(),
        "--db",
        db.path().to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn oracle_verify_passes_on_corpus() {
    let out = run(&[
        "oracle-verify",
        corpus("prog2.dvt").to_str().unwrap(),
        "--user",
        "u",
        "--model",
        corpus("prog2.model.json").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", stdout(&out));
    let text = stdout(&out);
    for check in
        ["taint-membership", "label-order", "end-to-end", "knowledge-tiling", "taint-agreement"]
    {
        assert!(text.contains(check), "{text}");
    }
}

#[test]
fn oversized_model_exits_2() {
    let mut m = tempfile::NamedTempFile::new().unwrap();
    writeln!(
        m,
        r#"{{"domains": {{"t.v": [0,1,2,3,4,5,6,7]}}, "rows": {{"t": {{"min":0,"max":8}}}}, "budgets": {{"states": 10}}}}"#
    )
    .unwrap();
    let mut f = tempfile::NamedTempFile::new().unwrap();
    writeln!(f, "@Table@ t(v: int)\nskip;").unwrap();
    let out = run(&[
        "oracle-verify",
        f.path().to_str().unwrap(),
        "--user",
        "u",
        "--model",
        m.path().to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn solver_env_var_overrides_backend() {
    // a broken external solver must surface as an error, proving the
    // override took effect
    let out = bin()
        .args(["check", corpus("shares_ok.dvt").to_str().unwrap(), "--user", "p"])
        .env("DIVCHECK_SOLVER", "/nonexistent/solver")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    // an honest external solver reproduces the builtin verdict
    let mut script = tempfile::NamedTempFile::new().unwrap();
    // the only refutation queries shares_ok needs are contradictory
    // equalities, all unsatisfiable
    writeln!(script, "#!/bin/sh\necho unsat").unwrap();
    let path = script.into_temp_path();
    let mut perms = std::fs::metadata(&path).unwrap().permissions();
    use std::os::unix::fs::PermissionsExt;
    perms.set_mode(0o755);
    std::fs::set_permissions(&path, perms).unwrap();
    let out = bin()
        .args(["check", corpus("shares_ok.dvt").to_str().unwrap(), "--user", "p"])
        .env("DIVCHECK_SOLVER", &path)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0), "{}", stdout(&out));
}

#[test]
fn prune_flag_keeps_verdicts() {
    for (file, user, code) in
        [("shop_ok.dvt", "u", 0), ("shop_bad.dvt", "u", 1), ("prog4.dvt", "u", 1)]
    {
        let out = run(&["check", corpus(file).to_str().unwrap(), "--user", user, "--prune"]);
        assert_eq!(out.status.code(), Some(code), "{file}");
    }
}
