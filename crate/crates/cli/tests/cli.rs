use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn batchiso(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_batchiso"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// A temp dir holding the exported fixtures.
fn fixtures() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    let o = batchiso(&["fixtures", "."], dir.path());
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    dir
}

fn inject_get(dir: &Path, out: &str) -> Output {
    batchiso(
        &[
            "inject",
            "toy_attention.onnx",
            "--attack",
            "get",
            "--target",
            "logits",
            "--source",
            "present_key",
            "--trigger-inputs",
            "toy_attention.trigger.json",
            "-o",
            out,
        ],
        dir,
    )
}

#[test]
fn check_exit_codes() {
    let d = fixtures();
    let o = batchiso(&["check", "mlp.onnx", "mlp.config.json"], d.path());
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(stdout(&o).contains("SAFE"));

    let o = batchiso(&["check", "dynquant_mlp.onnx", "dynquant_mlp.config.json"], d.path());
    assert_eq!(code(&o), 2);
    assert!(stdout(&o).contains("first tainted node: quantize"));

    let o = batchiso(
        &["check", "batch_mixing_reduce.onnx", "batch_mixing_reduce.config.json"],
        d.path(),
    );
    assert_eq!(code(&o), 2);
    assert!(stdout(&o).contains("batch_mean"));
}

#[test]
fn check_json_is_parseable() {
    let d = fixtures();
    let o = batchiso(
        &["check", "dynquant_mlp.onnx", "dynquant_mlp.config.json", "--json"],
        d.path(),
    );
    assert_eq!(code(&o), 2);
    let v: Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(v["verdict"], "leak");
    assert_eq!(v["first_tainted_node"], "quantize");
    assert_eq!(v["outputs"][0]["violating"], v["outputs"][0]["elements"]);
    let again = serde_json::to_string(&v).unwrap();
    assert_eq!(serde_json::from_str::<Value>(&again).unwrap(), v);
}

#[test]
fn bad_configs_are_errors() {
    let d = fixtures();
    let p = d.path();
    std::fs::write(
        p.join("missing.json"),
        r#"{"inputs": {"x": {"batch_axis": 0}}, "outputs": {"y": {"batch_axis": 0}}}"#,
    )
    .unwrap();
    std::fs::write(
        p.join("unknown.json"),
        r#"{"batch_size": 2, "inputs": {"x": {"batch_axis": 0}}, "outputs": {"y": {"batch_axis": 0}}, "colour": 1}"#,
    )
    .unwrap();
    std::fs::write(
        p.join("uncovered.json"),
        r#"{"batch_size": 2, "inputs": {"x": {"batch_axis": 0}}, "outputs": {}}"#,
    )
    .unwrap();
    for cfg in ["missing.json", "unknown.json", "uncovered.json", "absent.json"] {
        let o = batchiso(&["check", "mlp.onnx", cfg], p);
        assert_eq!(code(&o), 1, "{cfg}");
        assert!(stderr(&o).starts_with("error: "), "{cfg}: {}", stderr(&o));
    }
    let o = batchiso(&["check", "missing.onnx", "mlp.config.json"], p);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("load"));
}

#[test]
fn usage_errors_exit_one() {
    let d = tempfile::tempdir().unwrap();
    assert_eq!(code(&batchiso(&["check", "only_model.onnx"], d.path())), 1);
    assert_eq!(code(&batchiso(&["frobnicate"], d.path())), 1);
    assert_eq!(code(&batchiso(&["--help"], d.path())), 0);
}

#[test]
fn inject_then_check_and_oracle() {
    let d = fixtures();
    let p = d.path();
    let o = inject_get(p, "bd");
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(stdout(&o).contains("node_count_delta: 9"));
    let m: Value = serde_json::from_str(&std::fs::read_to_string(p.join("bd/manifest.json")).unwrap()).unwrap();
    assert_eq!(m["attack"], "get");
    assert_eq!(m["node_delta"], 9);
    for f in ["clean.onnx", "backdoored.onnx", "inputs.json", "outputs.json"] {
        assert!(p.join("bd").join(f).exists(), "{f}");
    }

    let o = batchiso(&["check", "bd/backdoored.onnx", "toy_attention.config.json"], p);
    assert_eq!(code(&o), 2);
    let o = batchiso(&["check", "bd/clean.onnx", "toy_attention.config.json"], p);
    assert_eq!(code(&o), 0);

    let o = batchiso(
        &[
            "oracle",
            "bd/backdoored.onnx",
            "toy_attention.config.json",
            "--inputs",
            "toy_attention.trigger.json",
            "--json",
        ],
        p,
    );
    assert_eq!(code(&o), 2, "{}", stderr(&o));
    let r: Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(r["witness"]["observed"], 0);
    assert_eq!(r["witness"]["perturbed"], 1);

    let o = batchiso(&["oracle", "mlp.onnx", "mlp.config.json", "--trials", "10"], p);
    assert_eq!(code(&o), 0);
    assert!(stdout(&o).contains("no interference observed"));
}

#[test]
fn golden_outputs_reproduce_with_run() {
    let d = fixtures();
    let p = d.path();
    assert_eq!(code(&inject_get(p, "bd")), 0);
    let o = batchiso(&["run", "bd/backdoored.onnx", "--inputs", "bd/inputs.json"], p);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let got: Value = serde_json::from_str(&stdout(&o)).unwrap();
    let want: Value = serde_json::from_str(&std::fs::read_to_string(p.join("bd/outputs.json")).unwrap()).unwrap();
    assert_eq!(got, want);
}

#[test]
fn run_rejects_wrong_shape() {
    let d = fixtures();
    let o = batchiso(&["run", "mlp.onnx", "--inputs", "toy_attention.trigger.json"], d.path());
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("run"));
}

#[test]
fn inject_plan_errors() {
    let d = fixtures();
    let p = d.path();
    let base = [
        "inject",
        "toy_attention.onnx",
        "--target",
        "logits",
        "--source",
        "present_key",
        "--trigger-const",
        "1.5",
    ];
    let with = |extra: &[&str]| {
        let mut a = base.to_vec();
        a.extend_from_slice(extra);
        if !a.contains(&"-o") {
            a.extend_from_slice(&["-o", "out"]);
        }
        batchiso(&a, p)
    };
    let o = with(&["--attack", "steer"]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("--vector"));
    assert_eq!(code(&with(&["--attack", "get", "--victim", "0"])), 1);
    assert_eq!(code(&with(&["--attack", "get", "--victim", "5"])), 1);
    let o = batchiso(
        &[
            "inject",
            "toy_attention.onnx",
            "--attack",
            "get",
            "--target",
            "nonexistent",
            "--source",
            "present_key",
            "--trigger-const",
            "1.5",
            "-o",
            "out",
        ],
        p,
    );
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("nonexistent"), "{}", stderr(&o));
    std::fs::write(p.join("v3.json"), "[1, 0, 0]").unwrap();
    assert_eq!(code(&with(&["--attack", "steer", "--vector", "v3.json"])), 1);

    std::fs::write(p.join("v6.json"), "[1, 0, 0, 0, 0, -1]").unwrap();
    let o = with(&["--attack", "steer", "--vector", "v6.json"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(stdout(&o).contains("node_count_delta: 10"));
    let o = with(&["--attack", "set", "-o", "set"]);
    assert!(stdout(&o).contains("node_count_delta: 10"));
    assert_eq!(
        code(&batchiso(
            &["check", "set/backdoored.onnx", "toy_attention.config.json"],
            p
        )),
        2
    );
}

#[test]
fn fail_fast_halts_at_the_scatter() {
    let d = fixtures();
    let p = d.path();
    assert_eq!(code(&inject_get(p, "bd")), 0);
    let o = batchiso(
        &[
            "check",
            "bd/backdoored.onnx",
            "toy_attention.config.json",
            "--fail-fast",
            "--json",
        ],
        p,
    );
    assert_eq!(code(&o), 2);
    let v: Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(v["halted_at"], "scatternd");
}

#[test]
fn fuzz_small_run_is_sound_and_deterministic() {
    let d = tempfile::tempdir().unwrap();
    let args = ["fuzz", "--graphs", "40", "--trials", "5", "--seed", "3", "--json"];
    let a = batchiso(&args, d.path());
    assert_eq!(code(&a), 0, "{}", stderr(&a));
    let mut va: Value = serde_json::from_str(&stdout(&a)).unwrap();
    assert_eq!(va["graphs"], 40);
    assert_eq!(va["counterexamples"].as_array().unwrap().len(), 0);
    let mut vb: Value = serde_json::from_str(&stdout(&batchiso(&args, d.path()))).unwrap();
    va.as_object_mut().unwrap().remove("seconds");
    vb.as_object_mut().unwrap().remove("seconds");
    assert_eq!(va, vb);
}
