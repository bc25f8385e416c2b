use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn data_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data")
}

fn minwidth(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_minwidth"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let o = minwidth(args);
    assert!(
        o.status.success(),
        "minwidth {args:?} failed:\n{}",
        String::from_utf8_lossy(&o.stderr)
    );
    String::from_utf8(o.stdout).unwrap()
}

fn read_json(p: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(p).unwrap()).unwrap()
}

fn quick_mnist<'a>(data: &'a str, out: &'a str) -> Vec<&'a str> {
    vec![
        "--dataset", "mnist8", "--data-dir", data, "--limit", "600", "--bootstrap-n", "200", "--max-epochs", "4",
        "--folds", "2", "--out", out,
    ]
}

#[test]
fn report_on_missing_file_fails_without_output() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("rendered");
    let o = minwidth(&["report", "/no/such/report.json", "--out", out.to_str().unwrap()]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("error:"));
    assert!(!out.exists());
}

#[test]
fn estimate_then_verify_then_report() {
    let dir = tempfile::tempdir().unwrap();
    let data = data_dir();
    let data = data.to_str().unwrap();
    let est = dir.path().join("est");
    let est_s = est.to_str().unwrap();

    let mut args = vec!["estimate"];
    args.extend(quick_mnist(data, est_s));
    let text = ok(&args);
    assert!(text.contains("layer"), "{text}");
    let report = read_json(&est.join("report.json"));
    let layers = report["per_layer"].as_array().unwrap();
    assert_eq!(layers.len(), 2);
    for l in layers {
        assert_eq!(l["pairs"].as_array().unwrap().len(), 2);
    }
    for f in ["summary.txt", "sweep.tsv", "run.json", "networks/fold_0.json", "networks/folds.json"] {
        assert!(est.join(f).exists(), "{f} missing");
    }
    let tsv = std::fs::read_to_string(est.join("sweep.tsv")).unwrap();
    assert!(tsv.starts_with("layer\tM\tworst_q"));

    let ver = dir.path().join("ver");
    let networks = est.join("networks");
    let mut args = vec!["verify", "--widths", "1=20,2=8", "--networks", networks.to_str().unwrap()];
    args.extend(quick_mnist(data, ver.to_str().unwrap()));
    ok(&args);
    let v = read_json(&ver.join("verify.json"));
    assert_eq!(v["agreement"].as_array().unwrap().len(), 4);
    assert!(v["worst_agreement"].as_f64().is_some());

    let rendered = dir.path().join("rendered");
    let text = ok(&["report", est.join("report.json").to_str().unwrap(), "--out", rendered.to_str().unwrap()]);
    assert_eq!(text, std::fs::read_to_string(est.join("summary.txt")).unwrap());
    assert!(rendered.join("sweep.tsv").exists());
    ok(&["report", ver.join("verify.json").to_str().unwrap()]);
}

#[test]
fn replaying_the_saved_config_reproduces_the_report() {
    let dir = tempfile::tempdir().unwrap();
    let data = data_dir();
    let first = dir.path().join("first");
    ok(&[
        "estimate", "--dataset", "wine", "--data-dir", data.to_str().unwrap(), "--bootstrap-n", "200",
        "--max-epochs", "5", "--out", first.to_str().unwrap(),
    ]);
    let second = dir.path().join("second");
    ok(&[
        "estimate", "--config", first.join("run.json").to_str().unwrap(), "--out", second.to_str().unwrap(),
    ]);
    let strip = |mut v: Value| {
        v["timing"] = Value::Null;
        v
    };
    assert_eq!(
        strip(read_json(&first.join("report.json"))),
        strip(read_json(&second.join("report.json")))
    );
}

#[test]
fn bad_inputs_are_rejected_up_front() {
    let o = minwidth(&["estimate", "--dataset", "mnist8", "--data-dir", "/nowhere"]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("does not exist"));
    let data = data_dir();
    let o = minwidth(&[
        "estimate", "--dataset", "wine", "--data-dir", data.to_str().unwrap(), "--formula", "FCx1(Linear),FCx0(ReLU),BN",
    ]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("position"));
}
