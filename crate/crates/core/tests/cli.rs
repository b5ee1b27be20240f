use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;
use splitnet::archspec::ArchSpec;

fn splitnet(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_splitnet"))
        .args(args)
        .current_dir(dir)
        .env_remove("SPLITNET_SEED")
        .output()
        .expect("binary runs")
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn unknown_flag_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(splitnet(&["cost", "--bogus"], dir.path()).status.code(), Some(1));
    assert_eq!(splitnet(&["nope"], dir.path()).status.code(), Some(1));
}

#[test]
fn help_exits_zero() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(splitnet(&["--help"], dir.path()).status.code(), Some(0));
}

#[test]
fn missing_input_file_is_a_user_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = splitnet(&["divide", "--spec", "missing.json", "--s", "2"], dir.path());
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn cost_preset_writes_report_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let out = splitnet(&["cost", "--preset", "wrn-16-8", "--out", "c"], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let c = dir.path().join("c");
    assert!(c.join("cost.json").exists() && c.join("cost.txt").exists());
    let m = json(&c.join("manifest.json"));
    assert_eq!(m["command"], "cost");
    assert_eq!(m["outputs"].as_array().unwrap().len(), 2);
}

#[test]
fn divide_writes_members_and_plan() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("wrn.json"), ArchSpec::wrn(16, 8.0, 100).to_json()).unwrap();
    let out = splitnet(
        &["divide", "--spec", "wrn.json", "--s", "4", "--wd-policy", "exp", "--out", "d"],
        dir.path(),
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let d = dir.path().join("d");
    for i in 0..4 {
        let m = ArchSpec::from_json(&fs::read_to_string(d.join(format!("member_{i}.json"))).unwrap()).unwrap();
        assert_eq!(m.base_channels, ArchSpec::wrn(16, 4.0, 100).base_channels);
    }
    assert!(d.join("plan.json").exists());
    let m = json(&d.join("manifest.json"));
    assert_eq!(m["inputs"].as_object().unwrap().len(), 1);
}

#[test]
fn goldens_pass() {
    let dir = tempfile::tempdir().unwrap();
    let out = splitnet(&["goldens", "--out", "g"], dir.path());
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stdout));
    assert!(dir.path().join("g/goldens.json").exists());
}

#[test]
fn gradcheck_passes_and_reports() {
    let dir = tempfile::tempdir().unwrap();
    let out = splitnet(&["gradcheck", "--seed", "7", "--out", "g"], dir.path());
    assert_eq!(out.status.code(), Some(0));
    let r = json(&dir.path().join("g/gradcheck.json"));
    assert!(r["max_rel_error"].as_f64().unwrap() < 1e-5);
    assert_eq!(r["seed"], 7);
}

#[test]
fn seed_falls_back_to_environment() {
    let dir = tempfile::tempdir().unwrap();
    let run = |seed: &str, out: &str| {
        let o = Command::new(env!("CARGO_BIN_EXE_splitnet"))
            .args(["datagen", "--kind", "blobs", "--n", "40", "--n-train", "30", "--out", out])
            .env("SPLITNET_SEED", seed)
            .current_dir(dir.path())
            .output()
            .unwrap();
        assert!(o.status.success());
        fs::read_to_string(dir.path().join(out).join("train.csv")).unwrap()
    };
    assert_eq!(run("9", "a"), run("9", "b"));
    assert_ne!(run("9", "a"), run("10", "c"));
    assert_eq!(json(&dir.path().join("a/manifest.json"))["base_seed"], 9);

    let bad = Command::new(env!("CARGO_BIN_EXE_splitnet"))
        .args(["datagen", "--kind", "blobs"])
        .env("SPLITNET_SEED", "minus one")
        .current_dir(dir.path())
        .output()
        .unwrap();
    assert_eq!(bad.status.code(), Some(1));
}

#[test]
fn datagen_train_eval_bench_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    let out = splitnet(
        &["datagen", "--kind", "spirals", "--n", "300", "--n-train", "240", "--seed", "3", "--out", "data"],
        p,
    );
    assert!(out.status.success());

    fs::write(
        p.join("run.toml"),
        r#"s = 2
max_epoch = 4
slow_epoch = 1
cot_warm_epochs = 2
batch_size = 32
base_seed = 5
views = [[{ kind = "feature-jitter", sigma = 0.05 }]]
[data]
kind = "csv"
train = "data/train.csv"
test = "data/test.csv"
"#,
    )
    .unwrap();
    let out = splitnet(&["train", "--config", "run.toml", "--out", "run"], p);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let run = p.join("run");
    let metrics = fs::read_to_string(run.join("metrics.csv")).unwrap();
    let mut lines = metrics.lines();
    assert_eq!(
        lines.next().unwrap(),
        "epoch,lr,lambda,ce_member_0,ce_member_1,cot,acc_member_0,acc_member_1,acc_ensemble"
    );
    assert_eq!(lines.count(), 4);
    assert!(run.join("member_0.ckpt").exists() && run.join("member_1.ckpt").exists());
    let m = json(&run.join("manifest.json"));
    assert_eq!(m["base_seed"], 5);
    // config file plus both data files
    assert_eq!(m["inputs"].as_object().unwrap().len(), 3);

    // replaying the manifest reproduces the metrics exactly
    let out = splitnet(&["train", "--config", "run/manifest.json", "--out", "again"], p);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(fs::read_to_string(p.join("again/metrics.csv")).unwrap(), metrics);

    for (ensemble, softmax) in [("avg", "none"), ("max", "pre")] {
        let out = splitnet(
            &[
                "eval", "--ckpt-dir", "run", "--data", "data/test.csv", "--ensemble", ensemble, "--softmax", softmax,
                "--out", "ev",
            ],
            p,
        );
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        let r = json(&p.join("ev/eval.json"));
        assert_eq!(r["samples"], 60);
        let acc = r["ensemble"].as_f64().unwrap();
        assert!((0.0..=1.0).contains(&acc));
    }

    let out = splitnet(
        &["bench", "--ckpt-dir", "run", "--mode", "par", "--batch", "16", "--reps", "10", "--out", "b"],
        p,
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let r = json(&p.join("b/bench.json"));
    assert_eq!(r["outputs_identical"], true);
    assert_eq!(r["members"], 2);
}

#[test]
fn train_rejects_unknown_config_keys() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("bad.json"), r#"{"max_epochs": 3}"#).unwrap();
    let out = splitnet(&["train", "--config", "bad.json"], dir.path());
    assert_eq!(out.status.code(), Some(1));
}
