use std::path::Path;
use std::process::{Command, Output};

use stitchfuse::tuning::PERFLIB_HEADER;

fn stitchfuse(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_stitchfuse"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn write_fixtures(dir: &Path) {
    let o = stitchfuse(&["fixtures", dir.to_str().unwrap()]);
    assert!(o.status.success());
}

fn record(op: &str, cost: f64, synthetic: bool) -> String {
    format!("{op}|4,4|0|1|row|64|-|{cost}|{synthetic}\n")
}

#[test]
fn span_table() {
    let dir = tempfile::tempdir().unwrap();
    write_fixtures(dir.path());
    let o = stitchfuse(&["span", dir.path().join("softmax_batchdot.json").to_str().unwrap()]);
    assert!(o.status.success());
    let text = stdout(&o);
    assert!(text.starts_with("layer 0: Dot.1\n"));
    assert!(text.contains("layer 9: x, mask, scale\n"));
    assert!(text.ends_with("critical_path_length: 9\n"));
}

#[test]
fn compile_reports_and_dumps_program() {
    let dir = tempfile::tempdir().unwrap();
    write_fixtures(dir.path());
    let graph = dir.path().join("softmax_batchdot.json");
    let program = dir.path().join("prog.txt");
    let o = stitchfuse(&[
        "--fuse-dot",
        "compile",
        graph.to_str().unwrap(),
        "--emit-program",
        program.to_str().unwrap(),
        "--json",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let report: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(report["fused_kernels"], 1);
    assert_eq!(report["baseline_kernels"], 10);
    let listing = std::fs::read_to_string(&program).unwrap();
    assert!(listing.contains("materialize Dot.1 (0,4,row) -> output#0"));
    assert!(listing.contains("barrier"));

    let o = stitchfuse(&["compile", graph.to_str().unwrap(), "--baseline-count", "20", "--json"]);
    let report: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(report["baseline_kernels"], 20);
}

#[test]
fn schedule_unsatisfiable() {
    let dir = tempfile::tempdir().unwrap();
    write_fixtures(dir.path());
    let graph = dir.path().join("softmax_batchdot.json");
    let o = stitchfuse(&[
        "--fuse-dot",
        "schedule",
        graph.to_str().unwrap(),
        "--computation",
        "Dot.1",
        "--schedule",
        "2,2,row",
    ]);
    assert!(o.status.success());
    assert!(stdout(&o).starts_with("UNSATISFIABLE"));
}

#[test]
fn run_compares_with_reference() {
    let dir = tempfile::tempdir().unwrap();
    write_fixtures(dir.path());
    let graph = dir.path().join("reduce_transpose_mix.json");
    let inputs = dir.path().join("inputs.json");
    std::fs::write(&inputs, r#"{"x": {"shape": [8, 16, 32], "dtype": "f32", "random_seed": 3}}"#).unwrap();
    let o = stitchfuse(&["run", graph.to_str().unwrap(), "--inputs", inputs.to_str().unwrap(), "--compare-reference"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let outputs: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(outputs["s"]["shape"], serde_json::json!([8]));
}

#[test]
fn perflib_tools() {
    let dir = tempfile::tempdir().unwrap();
    let p = |n: &str| dir.path().join(n).to_str().unwrap().to_string();
    std::fs::write(p("empty"), format!("{PERFLIB_HEADER}\n")).unwrap();
    let o = stitchfuse(&["perflib", "dump", &p("empty")]);
    assert_eq!(stdout(&o), format!("{PERFLIB_HEADER}\n"));

    let a: String = ["add", "exp", "tanh"].iter().map(|op| record(op, 1.0, true)).collect();
    let b: String = ["neg", "log"].iter().map(|op| record(op, 2.0, false)).collect();
    std::fs::write(p("a"), a).unwrap();
    std::fs::write(p("b"), b).unwrap();
    let o = stitchfuse(&["perflib", "merge", &p("out"), &p("a"), &p("b")]);
    assert!(o.status.success());
    assert_eq!(stdout(&o), "5 entries\n");

    std::fs::write(p("syn"), record("exp", 10.0, true)).unwrap();
    std::fs::write(p("meas"), record("exp", 8.0, false)).unwrap();
    stitchfuse(&["perflib", "merge", &p("conflict"), &p("syn"), &p("meas")]);
    let o = stitchfuse(&["perflib", "dump", &p("conflict")]);
    assert!(stdout(&o).contains("exp|4,4|0|1|row|64|-|8|false"), "{}", stdout(&o));

    let o = stitchfuse(&["perflib", "stats", &p("out")]);
    assert!(stdout(&o).contains("synthetic_fraction: 0.6000"));
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, "{ not json").unwrap();
    assert_eq!(stitchfuse(&["span", bad.to_str().unwrap()]).status.code(), Some(1));
    assert_eq!(stitchfuse(&["span", "/definitely/missing.json"]).status.code(), Some(1));
    assert_eq!(stitchfuse(&["no-such-command"]).status.code(), Some(1));
    let malformed = dir.path().join("lib");
    std::fs::write(&malformed, "exp|4|0|1|row|64|-|1.0|true\nbroken line\n").unwrap();
    let o = stitchfuse(&["perflib", "dump", malformed.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("line 2"));
    assert_eq!(stitchfuse(&["--help"]).status.code(), Some(0));
}
