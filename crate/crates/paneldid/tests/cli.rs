//! End-to-end checks of the command-line binary: exit codes, file outputs,
//! and rerun determinism. Everything runs against temp directories.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_paneldid"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary should launch")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("no exit code (killed by signal?)")
}

/// Draw a panel from a built-in population into `dir`; returns the
/// panel/schema paths as strings.
fn simulate_into(dir: &Path, dgp: &str, n: usize, seed: u64) -> (String, String) {
    let out = run(&[
        "simulate",
        "--dgp",
        dgp,
        "--n",
        &n.to_string(),
        "--seed",
        &seed.to_string(),
        "--out-dir",
        dir.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "simulate failed: {}", stderr(&out));
    (
        dir.join("panel.csv").to_str().unwrap().to_string(),
        dir.join("schema.json").to_str().unwrap().to_string(),
    )
}

#[test]
fn help_succeeds_and_bad_usage_fails() {
    let help = run(&["--help"]);
    assert_eq!(code(&help), 0);
    assert!(stdout(&help).contains("paneldid"));
    for sub in ["validate", "estimate", "balance", "simulate", "oracle-check"] {
        assert!(stdout(&help).contains(sub), "help does not list `{sub}`");
    }

    let bad = run(&["frobnicate"]);
    assert_eq!(code(&bad), 1, "unknown subcommand should exit 1");

    let missing = run(&["simulate", "--dgp", "assumption4_ok"]);
    assert_eq!(code(&missing), 1, "missing required --n should exit 1");
}

#[test]
fn validate_rejects_an_unbalanced_panel() {
    let dir = tempfile::tempdir().unwrap();
    // unit c is missing period 2
    let csv = "\
unit,time,y,x,group
a,1,0.1,0.3,0
a,2,0.4,0.5,0
b,1,0.2,0.1,2
b,2,0.9,0.2,2
c,1,0.0,0.7,0
";
    let csv_path = dir.path().join("bad.csv");
    fs::write(&csv_path, csv).unwrap();
    let schema_path = dir.path().join("schema.json");
    fs::write(
        &schema_path,
        r#"{"unit":"unit","time":"time","outcome":"y","group":"group","tv":["x"]}"#,
    )
    .unwrap();

    let out = run(&[
        "validate",
        "--input",
        csv_path.to_str().unwrap(),
        "--schema",
        schema_path.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 1, "invalid data must exit 1");
    assert!(
        stdout(&out).contains("unbalanced panel"),
        "report should name the problem: {}",
        stdout(&out)
    );
    assert!(stderr(&out).contains("failed validation"), "{}", stderr(&out));
}

#[test]
fn validate_accepts_a_simulated_panel() {
    let dir = tempfile::tempdir().unwrap();
    let (panel, schema) = simulate_into(dir.path(), "staggered_3g", 150, 11);
    let out = run(&["validate", "--input", &panel, "--schema", &schema]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert!(stdout(&out).contains("\"errors\": []"), "{}", stdout(&out));
}

#[test]
fn simulate_is_deterministic_for_a_fixed_seed() {
    let d1 = tempfile::tempdir().unwrap();
    let d2 = tempfile::tempdir().unwrap();
    simulate_into(d1.path(), "hidden_linearity_level", 200, 42);
    simulate_into(d2.path(), "hidden_linearity_level", 200, 42);
    for name in ["panel.csv", "schema.json", "truth.json"] {
        let a = fs::read(d1.path().join(name)).unwrap();
        let b = fs::read(d2.path().join(name)).unwrap();
        assert_eq!(a, b, "{name} differs between identically seeded runs");
    }

    let d3 = tempfile::tempdir().unwrap();
    simulate_into(d3.path(), "hidden_linearity_level", 200, 43);
    let a = fs::read(d1.path().join("panel.csv")).unwrap();
    let c = fs::read(d3.path().join("panel.csv")).unwrap();
    assert_ne!(a, c, "different seeds should draw different panels");
}

#[test]
fn estimate_writes_outputs_and_reruns_are_byte_identical() {
    let data_dir = tempfile::tempdir().unwrap();
    let out_dir = tempfile::tempdir().unwrap();
    let (panel, schema) = simulate_into(data_dir.path(), "staggered_3g", 300, 7);

    let args = [
        "estimate",
        "--input",
        &panel,
        "--schema",
        &schema,
        "--method",
        "aipw",
        "--bootstrap",
        "0",
        "--out-dir",
        out_dir.path().to_str().unwrap(),
    ];
    let out = run(&args);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert!(stdout(&out).contains("ATT_overall"), "{}", stdout(&out));
    for name in ["estimates.json", "estimates.csv", "aggregates.csv"] {
        assert!(out_dir.path().join(name).exists(), "missing {name}");
    }
    let first: Vec<u8> = fs::read(out_dir.path().join("estimates.json")).unwrap();

    let rerun = run(&args);
    assert_eq!(code(&rerun), 0);
    let second = fs::read(out_dir.path().join("estimates.json")).unwrap();
    assert_eq!(first, second, "rerun with identical inputs changed estimates.json");
}

#[test]
fn estimate_with_bootstrap_reports_standard_errors() {
    let data_dir = tempfile::tempdir().unwrap();
    let out_dir = tempfile::tempdir().unwrap();
    let (panel, schema) = simulate_into(data_dir.path(), "assumption4_ok", 250, 3);
    let out = run(&[
        "estimate",
        "--input",
        &panel,
        "--schema",
        &schema,
        "--method",
        "ra",
        "--bootstrap",
        "40",
        "--seed",
        "9",
        "--out-dir",
        out_dir.path().to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert!(
        stdout(&out).contains("(se "),
        "bootstrap run should print a standard error: {}",
        stdout(&out)
    );
    let doc = fs::read_to_string(out_dir.path().join("estimates.json")).unwrap();
    let v: serde_json::Value = serde_json::from_str(&doc).unwrap();
    assert_eq!(v["config"]["bootstrap"], 40, "config echo should record the rep count");
}

#[test]
fn balance_writes_all_three_report_files() {
    let data_dir = tempfile::tempdir().unwrap();
    let out_dir = tempfile::tempdir().unwrap();
    let (panel, schema) = simulate_into(data_dir.path(), "hidden_linearity_level", 400, 5);
    let out = run(&[
        "balance",
        "--input",
        &panel,
        "--schema",
        &schema,
        "--weights",
        "aipw",
        "--out-dir",
        out_dir.path().to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    for name in ["balance.json", "balance.csv", "balance.svg"] {
        assert!(out_dir.path().join(name).exists(), "missing {name}");
    }
    let svg = fs::read_to_string(out_dir.path().join("balance.svg")).unwrap();
    assert!(svg.starts_with("<svg"), "balance.svg is not an SVG document");
}

#[test]
fn oracle_check_passes_on_builtins_and_honors_only() {
    let out = run(&["oracle-check"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let text = stdout(&out);
    for name in ["assumption4_ok", "staggered_3g", "pretrend_violation"] {
        assert!(text.contains(name), "oracle-check output lacks {name}");
    }

    let one = run(&["oracle-check", "--only", "assumption4_ok"]);
    assert_eq!(code(&one), 0);
    assert!(stdout(&one).contains("assumption4_ok"));
    assert!(!stdout(&one).contains("staggered_3g"));

    let unknown = run(&["oracle-check", "--only", "no_such_fixture"]);
    assert_eq!(code(&unknown), 1, "unknown fixture name should exit 1");
}

#[test]
fn config_file_supplies_defaults_and_flags_override() {
    let data_dir = tempfile::tempdir().unwrap();
    let out_dir = tempfile::tempdir().unwrap();
    let (panel, schema_path) = simulate_into(data_dir.path(), "assumption4_ok", 200, 21);
    let schema_doc: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(&schema_path).unwrap()).unwrap();

    let config = serde_json::json!({
        "input": panel,
        "schema": schema_doc,
        "method": "ra",
        "bootstrap": 0,
        "out_dir": out_dir.path(),
    });
    let config_path = data_dir.path().join("run.json");
    fs::write(&config_path, serde_json::to_string_pretty(&config).unwrap()).unwrap();

    let out = run(&["estimate", "--config", config_path.to_str().unwrap()]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let doc = fs::read_to_string(out_dir.path().join("estimates.json")).unwrap();
    let v: serde_json::Value = serde_json::from_str(&doc).unwrap();
    assert_eq!(v["config"]["method"], "ra");

    // a flag on the command line beats the config file
    let out2 = run(&[
        "estimate",
        "--config",
        config_path.to_str().unwrap(),
        "--method",
        "aipw",
    ]);
    assert_eq!(code(&out2), 0, "{}", stderr(&out2));
    let doc2 = fs::read_to_string(out_dir.path().join("estimates.json")).unwrap();
    let v2: serde_json::Value = serde_json::from_str(&doc2).unwrap();
    assert_eq!(v2["config"]["method"], "aipw");
}
