use std::path::Path;
use std::process::Command;

use vidiff::cli::{run, MANIFEST_FILE, REPORT_FILE};

fn vidiff(args: &[&str]) -> i32 {
    let mut full = vec!["vidiff"];
    full.extend_from_slice(args);
    run(full)
}

fn manifest(dir: &Path) -> serde_json::Value {
    serde_json::from_slice(&std::fs::read(dir.join(MANIFEST_FILE)).unwrap()).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(vidiff(&[]), 1);
    assert_eq!(vidiff(&["frobnicate"]), 1);
    assert_eq!(vidiff(&["sample", "--count", "x"]), 1);
    assert_eq!(vidiff(&["--help"]), 0);
}

#[test]
fn bad_config_and_missing_data() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let code = vidiff(&[
        "train",
        "--config",
        "tiny",
        "--set",
        "model.depth=3",
        "--data",
        p(dir.path()),
        "--out",
        p(&out),
    ]);
    assert_eq!(code, 1);
    let m = manifest(&out);
    assert_eq!(m["status"], "failed");
    assert!(m["error"].as_str().unwrap().contains("depth"));

    let code = vidiff(&[
        "train",
        "--data",
        p(&dir.path().join("nope")),
        "--out",
        p(&out),
    ]);
    assert_eq!(code, 2);
    let code = vidiff(&[
        "inspect",
        "--checkpoint",
        p(&dir.path().join("missing.vdtc")),
    ]);
    assert_eq!(code, 2);
    let code = vidiff(&[
        "train",
        "--config",
        p(&dir.path().join("missing.toml")),
        "--data",
        p(dir.path()),
        "--out",
        p(&out),
    ]);
    assert_ne!(code, 0);
}

#[test]
fn make_synthetic_writes_frames_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().join("synth");
    assert_eq!(
        vidiff(&[
            "make-synthetic",
            "--out",
            p(&root),
            "--videos",
            "2",
            "--frames",
            "5",
            "--size",
            "16",
            "--seed",
            "4"
        ]),
        0
    );
    for v in ["video_000", "video_001"] {
        let frames = std::fs::read_dir(root.join(v)).unwrap().count();
        assert_eq!(frames, 5);
    }
    let m = manifest(&root);
    assert_eq!(m["status"], "ok");
    assert_eq!(m["seed"], 4);
    assert_eq!(m["outputs"].as_array().unwrap().len(), 2);
}

#[test]
fn eval_report_is_byte_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().join("real");
    assert_eq!(
        vidiff(&[
            "make-synthetic",
            "--out",
            p(&root),
            "--videos",
            "3",
            "--frames",
            "10",
            "--size",
            "24"
        ]),
        0
    );
    let gen = dir.path().join("gen");
    assert_eq!(
        vidiff(&[
            "make-synthetic",
            "--out",
            p(&gen),
            "--videos",
            "2",
            "--frames",
            "12",
            "--size",
            "24",
            "--seed",
            "9"
        ]),
        0
    );
    let mut reports = Vec::new();
    for name in ["a", "b"] {
        let out = dir.path().join(name);
        let code = vidiff(&[
            "eval",
            "--real",
            p(&root),
            "--generated",
            p(&gen),
            "--count",
            "40",
            "--seed",
            "3",
            "--out",
            p(&out),
        ]);
        assert_eq!(code, 0);
        reports.push(std::fs::read(out.join(REPORT_FILE)).unwrap());
    }
    assert_eq!(reports[0], reports[1]);
    let r: serde_json::Value = serde_json::from_slice(&reports[0]).unwrap();
    assert_eq!(r["clip_len"], 10);
    assert_eq!(r["count"], 40);
    let fvd = r["metrics"][0]["value"].as_f64().unwrap();
    assert!(fvd > 0.0);
}

#[test]
fn binary_reports_exit_codes() {
    let exe = env!("CARGO_BIN_EXE_vidiff");
    let status = Command::new(exe).arg("--version").status().unwrap();
    assert_eq!(status.code(), Some(0));
    let status = Command::new(exe).args(["eval", "--real"]).status().unwrap();
    assert_eq!(status.code(), Some(1));
    let dir = tempfile::tempdir().unwrap();
    let status = Command::new(exe)
        .args([
            "eval",
            "--real",
            p(&dir.path().join("x")),
            "--generated",
            p(&dir.path().join("y")),
            "--out",
            p(dir.path()),
        ])
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(2));
}
