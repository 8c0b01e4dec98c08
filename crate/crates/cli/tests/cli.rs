use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn groundlab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_groundlab")).args(args).output().expect("binary runs")
}

fn write_tiny_config(dir: &Path) -> String {
    let path = dir.join("tiny.toml");
    fs::write(
        &path,
        "d = 8\nffn_mult = 1\nepochs = 1\nbatch_cap = 4\ntrain_referrals = 12\neval_referrals = 8\nablation_seeds = 1\nmve_views = 3\n",
    )
    .unwrap();
    path.to_str().unwrap().to_owned()
}

#[test]
fn generate_train_eval_mve_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_tiny_config(tmp.path());
    let data = tmp.path().join("data");
    let run = tmp.path().join("run");
    let (data_s, run_s) = (data.to_str().unwrap(), run.to_str().unwrap());

    let out = groundlab(&["generate", "--config", &cfg, "--seed", "3", "--out", data_s, "--count", "10"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(fs::read_to_string(data.join("referrals.jsonl")).unwrap().lines().count(), 10);

    let out = groundlab(&["train", "--config", &cfg, "--seed", "1", "--out", run_s, "--data", data_s]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let log = fs::read_to_string(run.join("log.jsonl")).unwrap();
    let first: serde_json::Value = serde_json::from_str(log.lines().next().unwrap()).unwrap();
    for key in ["step", "lr", "losses"] {
        assert!(first.get(key).is_some(), "log entry lacks {key}");
    }
    let ckpt = run.join("model.ckpt");
    let ckpt_s = ckpt.to_str().unwrap();

    let out = groundlab(&["eval", "--checkpoint", ckpt_s, "--out", run_s, "--data", data_s]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(run.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["counts"]["total"], 10);
    let offsets = fs::read_to_string(run.join("offsets.csv")).unwrap();
    assert_eq!(offsets.lines().next().unwrap(), "scene_id,referral_id,block,instance,ox,oy,oz");

    let out = groundlab(&["mve", "--checkpoint", ckpt_s, "--out", run_s, "--data", data_s, "--views", "1"]);
    assert!(out.status.success());
    let mve: serde_json::Value = serde_json::from_str(&fs::read_to_string(run.join("mve.json")).unwrap()).unwrap();
    assert_eq!(mve, report);
}

#[test]
fn training_twice_gives_identical_files() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_tiny_config(tmp.path());
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for dir in [&a, &b] {
        let out = groundlab(&["train", "--config", &cfg, "--out", dir.to_str().unwrap()]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }
    for file in ["log.jsonl", "model.ckpt", "config.json"] {
        assert_eq!(fs::read(a.join(file)).unwrap(), fs::read(b.join(file)).unwrap(), "{file} differs");
    }
}

#[test]
fn ablate_writes_json_and_csv() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_tiny_config(tmp.path());
    let out_dir = tmp.path().join("abl");
    let out = groundlab(&["ablate", "--config", &cfg, "--out", out_dir.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let table: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out_dir.join("ablation.json")).unwrap()).unwrap();
    assert_eq!(table["rows"].as_array().unwrap().len(), 6);
    let csv = fs::read_to_string(out_dir.join("ablation.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 6 * 2);
}

#[test]
fn gradcheck_passes_and_rejects_large_models() {
    let tmp = tempfile::tempdir().unwrap();
    let out_dir = tmp.path().join("gc");
    let out = groundlab(&["gradcheck", "--seeds", "1", "--out", out_dir.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stdout));
    assert!(out_dir.join("gradcheck.json").exists());

    let big = tmp.path().join("big.json");
    fs::write(&big, r#"{"d": 32}"#).unwrap();
    let out = groundlab(&["gradcheck", "--config", big.to_str().unwrap(), "--out", out_dir.to_str().unwrap()]);
    assert!(!out.status.success());
}

#[test]
fn bad_input_fails_with_nonzero_exit() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("bad.toml");
    fs::write(&cfg, "d = 8\nnot_a_key = 1\n").unwrap();
    let out = groundlab(&["train", "--config", cfg.to_str().unwrap(), "--out", tmp.path().to_str().unwrap()]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("not_a_key"));

    let out = groundlab(&["eval", "--checkpoint", tmp.path().join("missing.ckpt").to_str().unwrap()]);
    assert!(!out.status.success());
}
