use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"
seed = 3
online_seed = 4

[env]
dataset_transitions = 2000

[tasks]
num_tasks = 4
proportion = 0.1

[encoder]
hidden_width = 16
feature_dim = 4

[trainer]
gradient_steps = 40
batch_size = 16
qr_burn_in_steps = 40
log_interval = 10

[online]
agent_steps = 1500
min_replay = 100
eval_episodes = 5
log_interval = 500
"#;

fn pvn(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pvn"))
        .arg("--out")
        .arg(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn text(o: &Output) -> String {
    format!("{}{}", String::from_utf8_lossy(&o.stdout), String::from_utf8_lossy(&o.stderr))
}

fn tiny_config(dir: &Path) -> String {
    let path = dir.join("tiny.toml");
    fs::write(&path, TINY).unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn verify_theory_passes_and_writes_table() {
    let dir = tempfile::tempdir().unwrap();
    let o = pvn(dir.path(), &["verify-theory", "--random-mdps", "5"]);
    assert!(o.status.success(), "{}", text(&o));
    let table = fs::read_to_string(dir.path().join("theory.csv")).unwrap();
    assert!(table.starts_with("check,passed,detail"));
    assert!(!table.contains(",false,"));
}

#[test]
fn pipeline_from_dataset_to_mds() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let out = dir.path().join("run");

    let o = pvn(&out, &["--config", &cfg, "dataset"]);
    assert!(o.status.success(), "{}", text(&o));
    let data = out.join("dataset.pvnd");
    let o = pvn(&out, &["--config", &cfg, "pretrain", "--dataset", data.to_str().unwrap()]);
    assert!(o.status.success(), "{}", text(&o));
    for f in ["checkpoint.pvnc", "pretrain_log.csv", "config.toml"] {
        assert!(out.join(f).exists(), "{f} missing");
    }

    // the checkpoint carries its own config
    let ckpt = out.join("checkpoint.pvnc");
    let o = pvn(&out, &["online", "--ckpt", ckpt.to_str().unwrap()]);
    assert!(o.status.success(), "{}", text(&o));
    let eval = fs::read_to_string(out.join("eval.csv")).unwrap();
    assert_eq!(eval.lines().count(), 2);
    let episodes = fs::read_to_string(out.join("episodes.csv")).unwrap();
    assert_eq!(episodes.lines().count(), 6);

    let o = pvn(&out, &["mds", "--ckpt", ckpt.to_str().unwrap()]);
    assert!(o.status.success(), "{}", text(&o));
    let mds = fs::read_to_string(out.join("mds.csv")).unwrap();
    assert!(mds.starts_with("# features: penultimate layer"));
    assert!(out.join("smoothness.csv").exists());
}

#[test]
fn checkpoint_from_another_config_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let o = pvn(dir.path(), &["--config", &cfg, "pretrain"]);
    assert!(o.status.success(), "{}", text(&o));
    let other = dir.path().join("other.toml");
    fs::write(&other, TINY.replace("hidden_width = 16", "hidden_width = 8")).unwrap();
    let ckpt = dir.path().join("checkpoint.pvnc");
    let o = pvn(
        dir.path(),
        &["--config", other.to_str().unwrap(), "online", "--ckpt", ckpt.to_str().unwrap()],
    );
    assert!(!o.status.success());
    assert!(text(&o).contains("config hash mismatch"), "{}", text(&o));
}

#[test]
fn unknown_config_keys_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.toml");
    fs::write(&path, "[trainer]\nlearning_rat = 0.1\n").unwrap();
    let o = pvn(dir.path(), &["--config", path.to_str().unwrap(), "dataset"]);
    assert!(!o.status.success());
    assert!(text(&o).contains("learning_rat"), "{}", text(&o));
}

#[test]
fn sweep_resume_leaves_outputs_untouched() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let out = dir.path().join("sweep");
    let args = ["--config", &cfg, "sweep", "--widths", "1", "--tasks", "0,4", "--seeds", "0"];
    let o = pvn(&out, &args);
    assert!(o.status.success(), "{}", text(&o));
    let table = fs::read(out.join("sweep.csv")).unwrap();
    let trend = fs::read(out.join("trend.csv")).unwrap();
    assert_eq!(String::from_utf8_lossy(&table).lines().count(), 3);
    let o = pvn(&out, &args);
    assert!(o.status.success(), "{}", text(&o));
    assert_eq!(fs::read(out.join("sweep.csv")).unwrap(), table);
    assert_eq!(fs::read(out.join("trend.csv")).unwrap(), trend);
}

#[test]
fn ablation_report_without_runs_fails() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let o = pvn(dir.path(), &["--config", &cfg, "ablate", "--seeds", "0,1", "--report-only"]);
    assert!(!o.status.success());
    assert!(text(&o).contains("missing run"), "{}", text(&o));
}

#[test]
fn activations_table_has_one_row_per_task() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let o = pvn(dir.path(), &["--config", &cfg, "activations", "--proportions", "0.1", "--seeds", "0,1"]);
    assert!(o.status.success(), "{}", text(&o));
    let table = fs::read_to_string(dir.path().join("activations.csv")).unwrap();
    assert_eq!(table.lines().count(), 1 + 2 * 4);
}
