//! End-to-end runs of the `nestedformer` binary.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn nf(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_nestedformer"))
        .args(args)
        .env("NF_THREADS", "1")
        .output()
        .expect("binary runs")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn help_and_version_exit_zero() {
    assert_eq!(nf(&["--help"]).status.code(), Some(0));
    assert_eq!(nf(&["--version"]).status.code(), Some(0));
    assert_eq!(nf(&["train", "--help"]).status.code(), Some(0));
}

#[test]
fn bad_usage_and_missing_files_exit_one() {
    assert_eq!(nf(&["no-such-command"]).status.code(), Some(1));
    let tmp = tempfile::tempdir().unwrap();
    let out = nf(&[
        "eval",
        "--checkpoint",
        "/nonexistent.nfck",
        "--data",
        "/nonexistent",
        "--out",
        p(tmp.path()),
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(!out.stderr.is_empty());
}

#[test]
fn gen_train_eval_pipeline() {
    let tmp = tempfile::tempdir().unwrap();
    let (data, run, eval) = (tmp.path().join("data"), tmp.path().join("run"), tmp.path().join("eval"));
    let spec = tmp.path().join("spec.json");
    fs::write(&spec, r#"{"extents": [16, 16, 16], "radius": [2.0, 4.0], "seed": 3}"#).unwrap();

    let out = nf(&["gen", "--spec", p(&spec), "--cases", "3", "--out", p(&data)]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(data.join("case_0002/volume.mmv").exists());
    assert!(data.join("manifest.json").exists());

    let out = nf(&[
        "train",
        "--data",
        p(&data),
        "--steps",
        "3",
        "--lr",
        "1e-3",
        "--out",
        p(&run),
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let log = fs::read_to_string(run.join("train.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 3);
    for line in log.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert!(v["loss"].as_f64().unwrap().is_finite());
    }
    let ckpt = run.join("final.nfck");
    assert!(ckpt.exists());

    let out = nf(&["eval", "--checkpoint", p(&ckpt), "--data", p(&data), "--out", p(&eval)]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = fs::read_to_string(eval.join("report.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("case,class,dice,hd95"));
    // (cases + summary row) × foreground classes.
    assert_eq!(lines.count(), (3 + 1) * 2);
    let json: serde_json::Value = serde_json::from_str(&fs::read_to_string(eval.join("report.json")).unwrap()).unwrap();
    assert!(json.is_object());

    // A mismatched expected config is refused unless forced.
    let model = tmp.path().join("model.json");
    let mut cfg = serde_json::from_slice::<serde_json::Value>(&fs::read(run.join("manifest.json")).unwrap()).unwrap()
        ["config"]["model"]
        .clone();
    cfg["seed"] = serde_json::json!(99);
    fs::write(&model, cfg.to_string()).unwrap();
    let args = [
        "eval",
        "--checkpoint",
        p(&ckpt),
        "--data",
        p(&data),
        "--model",
        p(&model),
        "--out",
        p(&eval),
    ];
    let out = nf(&args);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--force-config"));
    let mut forced = args.to_vec();
    forced.push("--force-config");
    assert_eq!(nf(&forced).status.code(), Some(0));
}

#[test]
fn bench_attn_writes_counted_rows() {
    let tmp = tempfile::tempdir().unwrap();
    let out = nf(&[
        "bench-attn",
        "--grid",
        "4,4,4",
        "--window",
        "2,2,2",
        "--reps",
        "1",
        "--out",
        p(tmp.path()),
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = fs::read_to_string(tmp.path().join("bench_attn.csv")).unwrap();
    let mut rdr = csv::Reader::from_reader(csv.as_bytes());
    let headers = rdr.headers().unwrap().clone();
    let row = rdr.records().next().unwrap().unwrap();
    let get = |k: &str| row[headers.iter().position(|h| h == k).unwrap()].to_string();
    assert_eq!(get("full"), "4096");
    assert_eq!(get("full"), get("full_counted"));
    assert_eq!(get("tsa"), (64 * 4 + 64 * 16 + 64 * 8).to_string());
    assert_eq!(get("tsa"), get("tsa_counted"));
}

#[test]
fn gradcheck_command_passes() {
    let tmp = tempfile::tempdir().unwrap();
    let out = nf(&["gradcheck", "--out", p(tmp.path())]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stdout));
    let csv = fs::read_to_string(tmp.path().join("gradcheck.csv")).unwrap();
    assert!(csv.lines().count() > 30);
}
