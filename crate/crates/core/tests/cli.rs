use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use ace_core::checkpoint::{Checkpoint, FORMAT_VERSION};
use ace_core::model::AceModel;
use ace_core::training::TrainConfig;

fn ace(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ace")).args(args).current_dir(dir).output().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// Correlated 3-column data with a categorical column.
fn write_data(dir: &Path, rows: usize) -> PathBuf {
    let mut text = String::from("a,b,c\n");
    let mut s = 12345u64;
    let mut next = || {
        s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        (s >> 11) as f64 / (1u64 << 53) as f64
    };
    for _ in 0..rows {
        let a = next() * 4.0 - 2.0;
        let b = 0.7 * a + next() - 0.5;
        let c = if a > 0.0 { "hi" } else { "lo" };
        text.push_str(&format!("{a},{b},{c}\n"));
    }
    fs::write(dir.join("data.csv"), text).unwrap();
    fs::write(
        dir.join("schema.json"),
        r#"{"columns":[{"name":"a","kind":"continuous"},{"name":"b","kind":"continuous"},
            {"name":"c","kind":"categorical","categories":["lo","hi"]}]}"#,
    )
    .unwrap();
    dir.join("data.csv")
}

const SMALL: &str = r#"{
  "train": {"steps": 60, "warmup_steps": 20, "batch_size": 32, "proposal_hidden": 16, "proposal_blocks": 1,
            "energy_hidden": 16, "energy_blocks": 1, "latent_dim": 4, "components": 3,
            "validation_every": 30, "seed": 5},
  "data": "data.csv", "schema": "schema.json", "checkpoint": "model.ace"
}"#;

fn trained(dir: &Path) {
    write_data(dir, 300);
    fs::write(dir.join("run.json"), SMALL).unwrap();
    let o = ace(&["train", "--config", "run.json"], dir);
    assert!(o.status.success(), "{}", stderr(&o));
}

#[test]
fn train_writes_checkpoint_and_log() {
    let dir = tempfile::tempdir().unwrap();
    trained(dir.path());
    let log = fs::read_to_string(dir.path().join("model.log.csv")).unwrap();
    let mut lines = log.lines();
    assert_eq!(lines.next(), Some("step,loss,proposal_ll,energy_ll,lr"));
    assert_eq!(lines.count(), 60);
    let ck = Checkpoint::load(&dir.path().join("model.ace")).unwrap();
    assert_eq!(ck.steps_completed, 60);
    assert!(ck.best_validation_ll.is_some());
}

#[test]
fn zero_steps_gives_the_initialization() {
    let dir = tempfile::tempdir().unwrap();
    write_data(dir.path(), 100);
    let o = ace(&["train", "--data", "data.csv", "--schema", "schema.json", "--steps", "0", "--seed", "9", "--out", "init.ace"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let ck = Checkpoint::load(&dir.path().join("init.ace")).unwrap();
    let cfg = TrainConfig {
        steps: 0,
        seed: 9,
        ..TrainConfig::default()
    };
    let init = AceModel::new(ck.model.schema().clone(), cfg.model_config(), 9).unwrap();
    assert_eq!(ck.model, init);
}

#[test]
fn missing_data_file_exits_2_naming_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let o = ace(&["train", "--data", "absent.csv", "--out", "m.ace"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("absent.csv"), "{}", stderr(&o));
}

#[test]
fn invalid_config_exits_2_naming_the_field() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("bad.json"), r#"{"train":{"learning_rate":-1}}"#).unwrap();
    let o = ace(&["train", "--config", "bad.json"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("learning_rate"), "{}", stderr(&o));
    fs::write(dir.path().join("typo.json"), r#"{"trian":{}}"#).unwrap();
    let o = ace(&["train", "--config", "typo.json"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("trian"), "{}", stderr(&o));
}

#[test]
fn power_preset_resolves_to_published_values() {
    let dir = tempfile::tempdir().unwrap();
    let o = ace(&["train", "--preset", "power", "--dry-run"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["dropout"], 0.2);
    assert_eq!(v["mse_penalty"], 1.0);
    assert_eq!(v["steps"], 1_600_000);
    assert_eq!(v["warmup_steps"], 5000);
    assert_eq!(v["noise_scale"], 0.003);
    assert_eq!(v["learning_rate"], 1e-4);
    assert_eq!(v["batch_size"], 512);
    assert_eq!(v["proposal_hidden"], 512);
    assert_eq!(v["proposal_blocks"], 4);
    assert_eq!(v["latent_dim"], 64);
}

#[test]
fn eval_is_byte_identical_across_runs() {
    let dir = tempfile::tempdir().unwrap();
    trained(dir.path());
    let args = [
        "eval", "--checkpoint", "model.ace", "--data", "data.csv", "--trials", "2", "--seed", "3", "--marginal", "2",
    ];
    let a = ace(&args, dir.path());
    let b = ace(&args, dir.path());
    assert!(a.status.success(), "{}", stderr(&a));
    assert_eq!(a.stdout, b.stdout);
    let v: serde_json::Value = serde_json::from_slice(&a.stdout).unwrap();
    let metrics: Vec<&str> = v.as_array().unwrap().iter().map(|r| r["metric"].as_str().unwrap()).collect();
    assert_eq!(metrics, ["conditional_ll", "conditional_ll_proposal", "nrmse", "accuracy", "marginal_ll_2", "marginal_ll_2_proposal"]);
    assert_eq!(v[0]["protocol"]["mask"], "bernoulli:0.5");
    assert_eq!(v[0]["seed"], 3);
}

#[test]
fn impute_without_missing_cells_echoes_input() {
    let dir = tempfile::tempdir().unwrap();
    trained(dir.path());
    let o = ace(&["impute", "--checkpoint", "model.ace", "--data", "data.csv"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(String::from_utf8(o.stdout).unwrap(), fs::read_to_string(dir.path().join("data.csv")).unwrap());
}

#[test]
fn impute_fills_only_missing_cells() {
    let dir = tempfile::tempdir().unwrap();
    trained(dir.path());
    fs::write(dir.path().join("holes.csv"), "a,b,c\n0.5,,hi\n,NA,?\n1.25,0.5,lo\n").unwrap();
    let o = ace(&["impute", "--checkpoint", "model.ace", "--data", "holes.csv"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let out = String::from_utf8(o.stdout).unwrap();
    let rows: Vec<Vec<&str>> = out.lines().map(|l| l.split(',').collect()).collect();
    assert_eq!(rows[1][0], "0.5");
    assert!(rows[1][1].parse::<f64>().is_ok());
    assert!(["lo", "hi"].contains(&rows[2][2]));
    assert_eq!(rows[3], ["1.25", "0.5", "lo"]);
}

#[test]
fn single_candidate_energy_sampling_equals_proposal_sampling() {
    let dir = tempfile::tempdir().unwrap();
    trained(dir.path());
    let e = ace(&["sample", "--checkpoint", "model.ace", "--count", "20", "--energy", "1", "--seed", "8"], dir.path());
    let p = ace(&["sample", "--checkpoint", "model.ace", "--count", "20", "--proposal", "--seed", "8"], dir.path());
    assert!(e.status.success(), "{}", stderr(&e));
    assert_eq!(e.stdout, p.stdout);
    assert_eq!(String::from_utf8_lossy(&e.stdout).lines().count(), 21);
    let n = ace(&["sample", "--checkpoint", "model.ace", "--count", "20", "--energy", "16", "--seed", "8"], dir.path());
    assert!(n.status.success());
    assert_ne!(n.stdout, p.stdout);
}

#[test]
fn conditional_sampling_keeps_observed_cells() {
    let dir = tempfile::tempdir().unwrap();
    trained(dir.path());
    fs::write(dir.path().join("part.csv"), "a,b,c\n0.75,,hi\n").unwrap();
    let o = ace(&["sample", "--checkpoint", "model.ace", "--data", "part.csv", "--count", "3", "--energy", "8"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    for line in String::from_utf8(o.stdout).unwrap().lines().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        assert_eq!((f[0], f[2], f[4]), ("0", "0.75", "hi"));
        assert!(f[3].parse::<f64>().unwrap().is_finite());
    }
}

#[test]
fn audit_writes_report_files() {
    let dir = tempfile::tempdir().unwrap();
    trained(dir.path());
    let o = ace(
        &["audit", "--checkpoint", "model.ace", "--data", "data.csv", "--S", "5,50", "--conditionals", "20", "--out", "audit"],
        dir.path(),
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = fs::read_to_string(dir.path().join("audit/audit.csv")).unwrap();
    assert!(csv.starts_with("dim_index,S,Z_trapz,Z_hat,pct_error\n"));
    let summary: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.path().join("audit/audit_summary.json")).unwrap()).unwrap();
    assert_eq!(summary["summary"].as_array().unwrap().len(), 2);
}

#[test]
fn finetune_reports_before_and_after() {
    let dir = tempfile::tempdir().unwrap();
    trained(dir.path());
    let o = ace(
        &[
            "finetune", "--checkpoint", "model.ace", "--data", "data.csv", "--steps", "5", "--eval-orderings", "5",
            "--eval-rows", "10", "--out", "tuned.ace",
        ],
        dir.path(),
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert!(v["before"]["mean_std"].is_number() && v["after"]["mean_ll"].is_number());
    let ck = Checkpoint::load(&dir.path().join("tuned.ace")).unwrap();
    assert_eq!(ck.seed_lineage.len(), 2);
}

#[test]
fn schema_mismatch_and_newer_checkpoints_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    trained(dir.path());
    fs::write(dir.path().join("other.json"), r#"{"columns":[{"name":"a","kind":"continuous"}]}"#).unwrap();
    let o = ace(&["eval", "--checkpoint", "model.ace", "--data", "data.csv", "--schema", "other.json"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    fs::write(dir.path().join("wrong.csv"), "x,y,z\n1,2,lo\n").unwrap();
    let o = ace(&["eval", "--checkpoint", "model.ace", "--data", "wrong.csv"], dir.path());
    assert_eq!(o.status.code(), Some(2));

    let mut bytes = fs::read(dir.path().join("model.ace")).unwrap();
    bytes[8..12].copy_from_slice(&(FORMAT_VERSION + 1).to_le_bytes());
    fs::write(dir.path().join("future.ace"), bytes).unwrap();
    let o = ace(&["eval", "--checkpoint", "future.ace", "--data", "data.csv"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("newer"));
}

#[test]
fn diverging_training_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    write_data(dir.path(), 100);
    fs::write(
        dir.path().join("wild.json"),
        r#"{"train":{"steps":50,"warmup_steps":0,"learning_rate":1e200,"proposal_hidden":8,"energy_hidden":8,"latent_dim":2},
            "data":"data.csv","schema":"schema.json","checkpoint":"wild.ace"}"#,
    )
    .unwrap();
    let o = ace(&["train", "--config", "wild.json"], dir.path());
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    assert!(!dir.path().join("wild.ace").exists());
}

#[test]
fn bad_flags_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let o = ace(&["eval", "--checkpoint", "m.ace", "--data", "d.csv", "--mask", "half"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    let o = ace(&["sample", "--checkpoint", "m.ace", "--energy", "3", "--proposal"], dir.path());
    assert_eq!(o.status.code(), Some(2));
}
