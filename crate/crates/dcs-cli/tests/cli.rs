//! End-to-end exercises of the `dcs` binary: pipeline smoke, manifest
//! replay, and flag handling.

use std::path::Path;
use std::process::{Command, Output};

fn dcs(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dcs"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("binary runs")
}

fn stdout_json(out: &Output) -> serde_json::Value {
    assert!(
        out.status.success(),
        "stderr: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    serde_json::from_slice(&out.stdout).expect("stdout is JSON")
}

#[test]
fn help_exits_zero() {
    let dir = tempfile::tempdir().unwrap();
    let out = dcs(&["--help"], dir.path());
    assert!(out.status.success());
    let text = String::from_utf8_lossy(&out.stdout);
    for cmd in ["gen", "train", "search", "eval", "verify"] {
        assert!(text.contains(cmd), "usage mentions {cmd}");
    }
}

#[test]
fn malformed_flag_exits_nonzero_with_named_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = dcs(&["gen", "--identities", "not-a-number"], dir.path());
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("identities"), "error names the flag: {err}");

    let out = dcs(&["gen", "--kind", "bogus"], dir.path());
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("bogus"));
}

#[test]
fn unknown_subcommand_exits_nonzero() {
    let dir = tempfile::tempdir().unwrap();
    let out = dcs(&["frobnicate"], dir.path());
    assert!(!out.status.success());
}

#[test]
fn pipeline_reaches_high_map_and_manifests_replay() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();

    let out = dcs(
        &[
            "gen",
            "--identities",
            "10",
            "--per-identity",
            "20",
            "--tokens",
            "4",
            "--channels",
            "8",
            "--seed",
            "1",
            "--out-dir",
            "g",
        ],
        d,
    );
    let gen = stdout_json(&out);
    assert_eq!(gen["samples"], 200);
    assert!(d.join("g/dataset.json").exists());
    assert!(d.join("g/manifest.json").exists());

    let out = dcs(
        &[
            "train",
            "--dataset",
            "g/dataset.json",
            "--epochs",
            "8",
            "--eta",
            "1.0",
            "--seed",
            "3",
            "--out-dir",
            "t",
        ],
        d,
    );
    let train = stdout_json(&out);
    assert!(d.join("t/checkpoint.json").exists());
    let history = std::fs::read_to_string(d.join("t/history.csv")).unwrap();
    assert!(history.starts_with("epoch,ce,triplet,ibb,ib,map,rank1,tau,lr"));

    let out = dcs(
        &[
            "eval",
            "--checkpoint",
            "t/checkpoint.json",
            "--dataset",
            "g/dataset.json",
            "--out-dir",
            "e",
        ],
        d,
    );
    let eval = stdout_json(&out);
    let map = eval["metrics"]["mAP"].as_f64().unwrap();
    assert!(map >= 0.95, "pipeline mAP {map}");
    assert_eq!(train["mAP"].as_f64().unwrap(), map);

    // replaying the train manifest reproduces the metrics exactly
    let out = dcs(
        &["train", "--config", "t/manifest.json", "--out-dir", "t2"],
        d,
    );
    let replay = stdout_json(&out);
    assert_eq!(replay["mAP"], train["mAP"]);
    assert_eq!(replay["ibb"], train["ibb"]);
    let a = std::fs::read(d.join("t/checkpoint.json")).unwrap();
    let b = std::fs::read(d.join("t2/checkpoint.json")).unwrap();
    assert_eq!(a, b, "replayed checkpoint is bitwise identical");
}

#[test]
fn search_emits_deterministic_derived_model() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let out = dcs(
        &[
            "gen",
            "--identities",
            "4",
            "--per-identity",
            "6",
            "--seed",
            "2",
            "--out-dir",
            "g",
        ],
        d,
    );
    stdout_json(&out);
    let run = |sub: &str| {
        let out = dcs(
            &[
                "search",
                "--dataset",
                "g/dataset.json",
                "--steps",
                "5",
                "--seed",
                "9",
                "--out-dir",
                sub,
            ],
            d,
        );
        stdout_json(&out)["model"].clone()
    };
    assert_eq!(run("s1"), run("s2"));
}

#[test]
fn verify_passes_and_fails_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let out = dcs(
        &["verify", "--instances", "25", "--grad-configs", "3"],
        dir.path(),
    );
    let report = stdout_json(&out);
    assert_eq!(report["pass"], true);
}

#[test]
fn out_dir_env_var_is_default() {
    let dir = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_dcs"))
        .args(["gen", "--identities", "3", "--per-identity", "4", "--seed", "0"])
        .env("DCS_OUT_DIR", dir.path())
        .current_dir(dir.path())
        .output()
        .unwrap();
    assert!(out.status.success());
    assert!(dir.path().join("dataset.json").exists());
    assert!(dir.path().join("manifest.json").exists());
}
