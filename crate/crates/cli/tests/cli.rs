use std::io::Write;
use std::path::PathBuf;
use std::process::{Command, Stdio};

use procmat::process::ProcessJson;
use procmat::ProcessMatrix;

struct Run {
    code: i32,
    stdout: String,
    stderr: String,
}

fn procmat(args: &[&str], stdin: &str) -> Run {
    let mut child = Command::new(env!("CARGO_BIN_EXE_procmat"))
        .args(args)
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()
        .expect("spawn procmat");
    // A command that fails early may exit before reading its input.
    let _ = child.stdin.take().unwrap().write_all(stdin.as_bytes());
    let out = child.wait_with_output().unwrap();
    Run {
        code: out.status.code().unwrap_or(-1),
        stdout: String::from_utf8(out.stdout).unwrap(),
        stderr: String::from_utf8(out.stderr).unwrap(),
    }
}

/// Runs a pipeline, asserting every stage but the last exits 0.
fn pipeline(stages: &[&[&str]]) -> Run {
    let mut input = String::new();
    for (i, args) in stages.iter().enumerate() {
        let run = procmat(args, &input);
        if i + 1 == stages.len() {
            return run;
        }
        assert_eq!(run.code, 0, "stage {args:?} failed: {}", run.stderr);
        input = run.stdout;
    }
    unreachable!("empty pipeline")
}

fn pattern_file(name: &str) -> String {
    let root = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../patterns");
    root.join(format!("{name}.json")).to_string_lossy().into_owned()
}

fn process_of(json: &str) -> ProcessMatrix {
    let j: ProcessJson = serde_json::from_str(json).unwrap();
    ProcessMatrix::from_json(&j).unwrap()
}

#[test]
fn switch_validates() {
    let run = pipeline(&[&["build-switch"], &["validate"]]);
    assert_eq!(run.code, 0, "{}", run.stderr);
    let report: serde_json::Value = serde_json::from_str(&run.stdout).unwrap();
    assert_eq!(report["verdict"], true);
}

#[test]
fn example_two_is_not_qccc() {
    let run = pipeline(&[&["build-example", "2"], &["check-qccc", "--expect", "infeasible"]]);
    assert_eq!(run.code, 0, "{}", run.stderr);
    let verdict: serde_json::Value = serde_json::from_str(&run.stdout).unwrap();
    assert_eq!(verdict["status"], "infeasible");
    assert!(verdict["margin"].as_f64().unwrap() >= 1e-6);
    assert!(verdict["certificate"].is_object());
}

#[test]
fn wrong_expectation_exits_one() {
    let run = pipeline(&[&["build-example", "2"], &["check-qccc", "--expect", "feasible"]]);
    assert_eq!(run.code, 1);
    assert!(run.stderr.contains("expected Feasible"), "{}", run.stderr);
}

#[test]
fn dephased_switch_decomposes_end_to_end() {
    let file = pattern_file("dephase-all");
    let run = pipeline(&[
        &["build-switch"],
        &["apply-pattern", &file],
        &["decompose", "--method", "dephased-all"],
        &["check-decomposition"],
    ]);
    assert_eq!(run.code, 0, "{}", run.stderr);
}

#[test]
fn pattern_files_reproduce_closed_forms() {
    for n in 1..=3 {
        let file = pattern_file(&format!("example-{n}"));
        let piped = pipeline(&[&["build-switch"], &["apply-pattern", "--pattern", &file]]);
        assert_eq!(piped.code, 0, "{}", piped.stderr);
        let closed = procmat(&["build-example", &n.to_string()], "");
        let (a, b) = (process_of(&piped.stdout), process_of(&closed.stdout));
        assert!(a.op().distance(b.op()).unwrap() <= 1e-12, "example {n}");
    }
}

#[test]
fn flipped_example_is_qccc_by_both_routes() {
    let flipped = pipeline(&[&["build-example", "1"], &["apply-pattern", "--builtin", "flip-1"]]);
    assert_eq!(flipped.code, 0, "{}", flipped.stderr);
    let run = procmat(&["check-qccc", "--expect", "feasible"], &flipped.stdout);
    assert_eq!(run.code, 0, "{}", run.stderr);
    let decomposed = procmat(&["decompose", "--method", "qccc-from-qcqc", "--basis", "P_c=x"], &flipped.stdout);
    assert_eq!(decomposed.code, 0, "{}", decomposed.stderr);
    assert_eq!(procmat(&["check-decomposition"], &decomposed.stdout).code, 0);
}

#[test]
fn coherent_input_cannot_be_decomposed() {
    let run = pipeline(&[&["build-example", "2"], &["decompose", "--method", "dephased-inputs"]]);
    assert_eq!(run.code, 2);
    assert!(run.stderr.contains("not diagonal"), "{}", run.stderr);
}

#[test]
fn malformed_json_reports_position() {
    let run = procmat(&["validate"], "{\n  \"registry\": [\n    oops\n]}");
    assert_eq!(run.code, 2);
    assert!(run.stderr.contains("line 3"), "{}", run.stderr);
}

#[test]
fn unknown_builtin_is_an_input_error() {
    let switch = procmat(&["build-switch"], "");
    let run = procmat(&["apply-pattern", "--builtin", "example-9"], &switch.stdout);
    assert_eq!(run.code, 2);
}

#[test]
fn dump_system_lists_blocks_and_equalities() {
    let run = pipeline(&[&["build-example", "1"], &["check-qccc", "--dump-system"]]);
    assert_eq!(run.code, 0, "{}", run.stderr);
    let sys: serde_json::Value = serde_json::from_str(&run.stdout).unwrap();
    assert_eq!(sys["kind"], "qccc");
    assert_eq!(sys["blocks"].as_array().unwrap().len(), 6);
    let names: Vec<&str> = sys["equalities"].as_array().unwrap().iter().map(|e| e["name"].as_str().unwrap()).collect();
    assert!(names.contains(&"total"), "{names:?}");
}

#[test]
fn input_flag_reads_a_file() {
    let dir = std::env::temp_dir().join(format!("procmat-cli-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    let path = dir.join("w3.json");
    std::fs::write(&path, procmat(&["build-example", "3"], "").stdout).unwrap();
    let run = procmat(&["--input", path.to_str().unwrap(), "check-qcqc", "--expect", "feasible"], "");
    assert_eq!(run.code, 0, "{}", run.stderr);
    std::fs::remove_dir_all(&dir).unwrap();
}

#[test]
fn report_prints_both_verdicts() {
    let run = pipeline(&[&["build-example", "3"], &["report"]]);
    assert_eq!(run.code, 0, "{}", run.stderr);
    assert!(run.stdout.contains("QC-QC: feasible"), "{}", run.stdout);
    assert!(run.stdout.contains("QC-CC: infeasible"), "{}", run.stdout);
    assert!(run.stdout.contains("causally nonseparable"));
    let json = pipeline(&[&["build-example", "3"], &["report", "--json"]]);
    let v: serde_json::Value = serde_json::from_str(&json.stdout).unwrap();
    assert_eq!(v["qccc"]["status"], "infeasible");
}
