use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

const BIN: &str = env!("CARGO_BIN_EXE_vissyn");

fn vissyn(workdir: &Path, args: &[&str]) -> Output {
    Command::new(BIN)
        .env_remove("VISSYN_SEED")
        .env_remove("VISSYN_WORKDIR")
        .arg("--workdir")
        .arg(workdir)
        .args(args)
        .output()
        .unwrap()
}

fn ok(workdir: &Path, args: &[&str]) -> String {
    let out = vissyn(workdir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn json(path: &Path) -> Value {
    serde_json::from_slice(&std::fs::read(path).unwrap()).unwrap()
}

fn small_corpus(w: &Path) {
    ok(w, &["generate", "--count", "12", "--out", "corpus", "--seed", "3"]);
    ok(w, &["perturb", "--corpus", "corpus", "--count", "8", "--seed", "3"]);
}

#[test]
fn generate_perturb_evaluate_report_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let w = tmp.path();
    small_corpus(w);
    let manifest = json(&w.join("corpus/manifest.json"));
    assert_eq!(manifest["counts"]["correct"], 12);
    assert_eq!(manifest["counts"]["incorrect"], 8);

    let printed = ok(w, &["evaluate", "--corpus", "corpus", "--out", "out", "--seed", "3"]);
    let txt = std::fs::read_to_string(w.join("out/report.txt")).unwrap();
    assert_eq!(printed, txt);
    assert!(txt.contains("bacc%"), "{txt}");

    let again = ok(w, &["report", "--evaluation", "out/evaluation.json"]);
    assert_eq!(again, txt);
    let as_json = ok(w, &["report", "--evaluation", "out/evaluation.json", "--format", "json"]);
    assert_eq!(as_json, std::fs::read_to_string(w.join("out/report.json")).unwrap());

    let report: Value = serde_json::from_str(&as_json).unwrap();
    assert_eq!(report["schema"], "vissyn-report/1");
    assert_eq!(report["overall"]["summary"]["balanced_accuracy"], 1.0);
    assert_eq!(report["run"]["masking"], "part_based");
    assert_eq!(report["run"]["scenes"], 20);
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let w = tmp.path();
    assert_eq!(code(&vissyn(w, &["--help"])), 0);
    assert_eq!(code(&vissyn(w, &["generate", "--bogus"])), 1);
    assert_eq!(code(&vissyn(w, &["generate", "--out", "x"])), 1, "missing --count");
    assert_eq!(code(&vissyn(w, &["generate", "--count", "2", "--out", "c", "--drop-prob", "2"])), 1);
    assert_eq!(code(&vissyn(w, &["generate", "--count", "2", "--out", "c", "--grammar", "nope.toml"])), 1);
    assert_eq!(code(&vissyn(w, &["evaluate", "--corpus", "missing"])), 2);

    ok(w, &["generate", "--count", "3", "--out", "c"]);
    let out = vissyn(w, &["perturb", "--corpus", "c", "--count", "2", "--mix", "scatter=1"]);
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("background"));
    assert_eq!(code(&vissyn(w, &["perturb", "--corpus", "c", "--count", "2", "--mix", "melt=1"])), 1);
    assert_eq!(code(&vissyn(w, &["evaluate", "--corpus", "c", "--iou-threshold", "1.5"])), 1);

    std::fs::write(w.join("bad.toml"), "[pipeline]\niou = 0.5\n").unwrap();
    assert_eq!(code(&vissyn(w, &["--config", "bad.toml", "evaluate", "--corpus", "c"])), 1);
}

#[test]
fn seed_comes_from_the_environment() {
    let tmp = tempfile::tempdir().unwrap();
    let w = tmp.path();
    ok(w, &["generate", "--count", "4", "--out", "flag", "--seed", "5"]);
    let env = Command::new(BIN)
        .env("VISSYN_SEED", "5")
        .arg("--workdir")
        .arg(w)
        .args(["generate", "--count", "4", "--out", "env"])
        .output()
        .unwrap();
    assert!(env.status.success());
    ok(w, &["generate", "--count", "4", "--out", "other", "--seed", "6"]);
    let digest = |d: &str| std::fs::read(w.join(d).join("images/face-00000.ppm")).unwrap();
    assert!(digest("flag") == digest("env"));
    assert!(digest("flag") != digest("other"));
}

#[test]
fn config_file_sits_below_flags() {
    let tmp = tempfile::tempdir().unwrap();
    let w = tmp.path();
    ok(w, &["generate", "--count", "3", "--out", "c"]);
    std::fs::write(
        w.join("run.toml"),
        "seed = 11\n[pipeline]\niou_threshold = 0.5\nmasking = \"random\"\n",
    )
    .unwrap();
    ok(w, &["--config", "run.toml", "evaluate", "--corpus", "c", "--out", "a"]);
    let a = json(&w.join("a/evaluation.json"));
    assert_eq!(a["evaluation"]["config"]["iou_threshold"], 0.5);
    assert_eq!(a["evaluation"]["config"]["masking"], "random");
    assert_eq!(a["evaluation"]["config"]["seed"], 11);

    ok(w, &["--config", "run.toml", "evaluate", "--corpus", "c", "--out", "b", "--iou-threshold", "0.4", "--seed", "2"]);
    let b = json(&w.join("b/evaluation.json"));
    assert_eq!(b["evaluation"]["config"]["iou_threshold"], 0.4);
    assert_eq!(b["evaluation"]["config"]["seed"], 2);
}

#[test]
fn check_explains_a_single_image() {
    let tmp = tempfile::tempdir().unwrap();
    let w = tmp.path();
    small_corpus(w);
    let manifest = json(&w.join("corpus/manifest.json"));
    let scenes = manifest["scenes"].as_array().unwrap();
    let image_of = |correct: &str| {
        let e = scenes.iter().find(|e| e["correctness"] == correct).unwrap();
        format!("corpus/{}", e["image"].as_str().unwrap())
    };
    let good = ok(w, &["check", "--image", &image_of("correct")]);
    assert_eq!(good, "syntactically correct\n");
    let bad = ok(w, &["check", "--image", &image_of("incorrect")]);
    assert!(bad.contains(" in place of "), "{bad}");

    let v: Value = serde_json::from_str(&ok(w, &["check", "--image", &image_of("incorrect"), "--json"])).unwrap();
    assert_eq!(v["correct"], false);
    assert!(!v["errors"].as_array().unwrap().is_empty());
    assert!(v["trace"]["steps"].as_array().is_some());
}

#[test]
fn evaluate_writes_traces_and_isolates_broken_scenes() {
    let tmp = tempfile::tempdir().unwrap();
    let w = tmp.path();
    small_corpus(w);
    let manifest = json(&w.join("corpus/manifest.json"));
    let victim = manifest["scenes"][0]["image"].as_str().unwrap().to_owned();
    std::fs::write(w.join("corpus").join(&victim), b"not an image").unwrap();

    let out = vissyn(w, &["evaluate", "--corpus", "corpus", "--out", "out", "--trace-dir", "traces"]);
    assert_eq!(code(&out), 0);
    assert!(String::from_utf8_lossy(&out.stderr).contains("failed"));
    let traces = std::fs::read_dir(w.join("traces")).unwrap().count();
    assert_eq!(traces, 19);
    let report = json(&w.join("out/report.json"));
    assert_eq!(report["run"]["failed_scenes"].as_array().unwrap().len(), 1);
}

#[test]
fn external_backend_agrees_with_the_oracle() {
    let tmp = tempfile::tempdir().unwrap();
    let w = tmp.path();
    small_corpus(w);
    ok(w, &["evaluate", "--corpus", "corpus", "--out", "oracle", "--seed", "4"]);
    ok(
        w,
        &[
            "evaluate", "--corpus", "corpus", "--out", "external", "--seed", "4", "--backend", "external",
            "--external-program", BIN, "--external-arg", "serve", "--external-arg", "--seed", "--external-arg", "4",
            "--forward-hints", "--pool-size", "2",
        ],
    );
    let a = json(&w.join("oracle/evaluation.json"));
    let b = json(&w.join("external/evaluation.json"));
    assert_eq!(a["evaluation"], b["evaluation"]);
    assert_ne!(a["run"]["backend"], b["run"]["backend"]);
}

#[test]
fn workdir_resolves_relative_paths() {
    let tmp = tempfile::tempdir().unwrap();
    let out = Command::new(BIN)
        .env("VISSYN_WORKDIR", tmp.path())
        .args(["generate", "--count", "1", "--out", "nested/c"])
        .output()
        .unwrap();
    assert!(out.status.success());
    assert!(tmp.path().join("nested/c/manifest.json").exists());
}
