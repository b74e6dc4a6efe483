use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use loopworld::config::RunConfig;

fn tiny_config() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.wm.denoiser_hidden = vec![16];
    cfg.wm.embedder_hidden = vec![4];
    cfg.wm.action_embed_dim = 4;
    cfg.wm.reward_hidden = vec![4];
    cfg.wm.euler_steps = 2;
    cfg.wm.batch_size = 4;
    cfg.wm.pretrain_steps = 6;
    cfg.wm.train_steps = 6;
    cfg.policy.trunk_hidden = vec![8];
    cfg.policy.feature_dim = 4;
    cfg.policy.sft_steps = 5;
    cfg.policy.batch_size = 4;
    cfg.rl.total_steps = 2;
    cfg.rl.groups_per_step = 1;
    cfg.rl.group_size = 2;
    cfg.sans.n_success = 5;
    cfg.sans.n_near = 5;
    cfg.pretrain.n_success = 1;
    cfg.pretrain.n_near = 1;
    cfg.pretrain.n_explore = 1;
    cfg.loop_.deploy_episodes = 3;
    cfg.loop_.seed_rollouts = 2;
    cfg.loop_.eval_episodes = 4;
    cfg.loop_.alignment_samples = 4;
    cfg
}

fn write_config(dir: &Path) -> std::path::PathBuf {
    let path = dir.join("tiny.json");
    fs::write(&path, tiny_config().to_json()).unwrap();
    path
}

fn loopworld(args: &[&str]) -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_loopworld"));
    cmd.args(args).arg("--quiet").env_remove("LOOPWORLD_OUT");
    cmd
}

fn stdout_json(out: &Output) -> serde_json::Value {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).unwrap()
}

#[test]
fn curate_reports_split_sizes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let out_dir = dir.path().join("run");
    let out = loopworld(&["--config", cfg.to_str().unwrap(), "--out", out_dir.to_str().unwrap(), "curate"])
        .output()
        .unwrap();
    let v = stdout_json(&out);
    assert_eq!(v["train_records"].as_u64().unwrap() + v["heldout_records"].as_u64().unwrap(), 10);
    assert!(out_dir.join(v["train"].as_str().unwrap()).is_dir());
}

#[test]
fn output_dir_comes_from_environment() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let out_dir = dir.path().join("from_env");
    let out = loopworld(&["--config", cfg.to_str().unwrap(), "curate"])
        .env("LOOPWORLD_OUT", &out_dir)
        .output()
        .unwrap();
    stdout_json(&out);
    assert!(out_dir.is_dir());
}

#[test]
fn iterate_then_report() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let out_dir = dir.path().join("run");
    let base = ["--config", cfg.to_str().unwrap(), "--out", out_dir.to_str().unwrap()];
    let run = |extra: &[&str]| {
        let args: Vec<&str> = base.iter().chain(extra).copied().collect();
        stdout_json(&loopworld(&args).output().unwrap())
    };
    let summary = run(&["iterate", "--k", "1"]);
    assert_eq!(summary.as_array().unwrap().len(), 1);
    let files = run(&["report"]);
    for f in files["files"].as_array().unwrap() {
        assert!(out_dir.join(f.as_str().unwrap()).is_file(), "{f}");
    }
}

#[test]
fn unknown_config_key_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.json");
    fs::write(&path, r#"{"wm": {"denoiser_width": 3}}"#).unwrap();
    let out = loopworld(&["--config", path.to_str().unwrap(), "curate"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("wm.denoiser_width"));
}

#[test]
fn unknown_ablation_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = loopworld(&["--out", dir.path().to_str().unwrap(), "ablate", "--variant", "no_flow"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn deploy_without_policy_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = loopworld(&["--out", dir.path().to_str().unwrap(), "deploy", "--iteration", "0"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("not found"));
}
