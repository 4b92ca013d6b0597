use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use moe_operator::data::{Family, GenSpec, InitialCondition, PdeInstanceSpec};
use moe_operator::model::ModelConfig;
use moe_operator::train::RunConfig;
use tempfile::TempDir;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_moe-op"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn moe-op")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn tiny_model() -> ModelConfig {
    ModelConfig {
        history: 2,
        height: 8,
        width: 8,
        patch: 4,
        embed_dim: 8,
        layers: 1,
        heads: 2,
        ..ModelConfig::default()
    }
}

fn recipe(family: Family, count: usize, seed: u64) -> GenSpec {
    GenSpec {
        template: PdeInstanceSpec {
            family,
            diffusivity: 0.1,
            velocity: [2.0, 1.0],
            reaction: 1.0,
            initial: InitialCondition {
                seed: 0,
                band_limit: 2,
                amplitude: 1.0,
                offset: 0.5,
            },
            height: 8,
            width: 8,
            dt: 0.01,
            substeps: 1,
            frames: 4,
        },
        count,
        seed,
    }
}

fn gen(dir: &Path, family: Family, count: usize, seed: u64) -> PathBuf {
    let spec = dir.join(format!("{}.json", family.name()));
    fs::write(&spec, serde_json::to_string(&recipe(family, count, seed)).unwrap()).unwrap();
    let out = dir.join(format!("{}.pded", family.name()));
    let o = run(&["gen-data", "--family", family.name(), "--spec", p(&spec), "--out", p(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    out
}

fn write_config(dir: &Path, name: &str, cfg: &RunConfig) -> PathBuf {
    let path = dir.join(name);
    fs::write(&path, serde_json::to_string_pretty(cfg).unwrap()).unwrap();
    path
}

fn base_config(datasets: Vec<PathBuf>, epochs: usize) -> RunConfig {
    let mut cfg = RunConfig::new(tiny_model(), epochs, 4, 7);
    cfg.datasets = datasets;
    cfg.record_wall_time = false;
    cfg
}

#[test]
fn gen_train_eval_inspect() {
    let dir = TempDir::new().unwrap();
    let heat = gen(dir.path(), Family::Heat, 3, 10);
    let adv = gen(dir.path(), Family::Advection, 3, 20);
    assert!(dir.path().join("heat.meta.json").exists());

    let cfg = write_config(dir.path(), "run.json", &base_config(vec![heat.clone(), adv.clone()], 2));
    let out = dir.path().join("run");
    let o = run(&["train", "--config", p(&cfg), "--out", p(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let metrics = fs::read_to_string(out.join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 3);

    let ckpt = out.join("model.ckpt");
    let o = run(&["eval", "--ckpt", p(&ckpt), "--data", p(&heat), p(&adv), "--rollout", "2", "--report-routing"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = stdout(&o);
    assert!(text.contains("one_step_l2re"));
    assert!(text.contains("rollout_l2re[2]"));
    assert!(text.contains("family,layer,expert0"));

    let o = run(&["routing-stats", "--ckpt", p(&ckpt), "--data", p(&heat), p(&adv)]);
    assert!(o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("tv_distance heat advection"));

    let dump = dir.path().join("dump");
    let o = run(&["rollout", "--ckpt", p(&ckpt), "--data", p(&heat), "--steps", "3", "--dump", p(&dump)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let rolled = moe_operator::data::read_dataset(&dump.join("heat.rollout.pded")).unwrap();
    assert_eq!(rolled.dims, [3, 1, 8, 8]);
    assert_eq!(rolled.trajectories.len(), 3);

    let o = run(&["inspect-ckpt", p(&ckpt)]);
    assert!(o.status.success());
    let summary: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert!(summary.is_object());
}

#[test]
fn split_run_resume_matches_single_run() {
    let dir = TempDir::new().unwrap();
    let heat = gen(dir.path(), Family::Heat, 3, 10);
    let dr = gen(dir.path(), Family::DiffusionReaction, 3, 30);

    let cfg = base_config(vec![heat, dr], 3);
    let full_cfg = write_config(dir.path(), "full.json", &cfg);
    let full = dir.path().join("full");
    assert!(run(&["train", "--config", p(&full_cfg), "--out", p(&full)]).status.success());

    let split = dir.path().join("split");
    assert!(run(&["train", "--config", p(&full_cfg), "--out", p(&split), "--until", "1"])
        .status
        .success());
    let mut resume = cfg.clone();
    resume.resume = Some(split.join("model.ckpt"));
    let resume_cfg = write_config(dir.path(), "resume.json", &resume);
    let o = run(&["train", "--config", p(&resume_cfg), "--out", p(&split)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));

    assert_eq!(
        fs::read(full.join("metrics.csv")).unwrap(),
        fs::read(split.join("metrics.csv")).unwrap()
    );
    let a = moe_operator::checkpoint::load_checkpoint(&full.join("model.ckpt")).unwrap();
    let b = moe_operator::checkpoint::load_checkpoint(&split.join("model.ckpt")).unwrap();
    assert_eq!(a.params.flat(), b.params.flat());
}

#[test]
fn grad_check_single_op_and_all() {
    let o = run(&["grad-check", "--op", "matmul"]);
    assert!(o.status.success(), "{}", stdout(&o));
    assert!(stdout(&o).starts_with("PASS matmul"));
    let o = run(&["grad-check"]);
    assert!(o.status.success(), "{}", stdout(&o));
    assert!(!stdout(&o).contains("FAIL"));
}

#[test]
fn config_errors_exit_2() {
    let dir = TempDir::new().unwrap();
    let heat = gen(dir.path(), Family::Heat, 2, 1);
    let mut cfg = base_config(vec![heat], 1);
    cfg.model.patch = 3;
    let path = write_config(dir.path(), "bad.json", &cfg);
    let o = run(&["train", "--config", p(&path), "--out", p(&dir.path().join("o"))]);
    assert_eq!(o.status.code(), Some(2));

    let o = run(&["grad-check", "--op", "no_such_op"]);
    assert_eq!(o.status.code(), Some(2));

    fs::write(dir.path().join("junk.json"), "{ not json").unwrap();
    let o = run(&["train", "--config", p(&dir.path().join("junk.json")), "--out", p(&dir.path().join("o"))]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn data_errors_exit_3() {
    let dir = TempDir::new().unwrap();
    let heat = gen(dir.path(), Family::Heat, 2, 1);
    let mut bytes = fs::read(&heat).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0xff;
    fs::write(&heat, bytes).unwrap();
    let cfg = write_config(dir.path(), "run.json", &base_config(vec![heat], 1));
    let o = run(&["train", "--config", p(&cfg), "--out", p(&dir.path().join("o"))]);
    assert_eq!(o.status.code(), Some(3), "{}", String::from_utf8_lossy(&o.stderr));

    let o = run(&["inspect-ckpt", p(&dir.path().join("missing.ckpt"))]);
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn numeric_errors_exit_4() {
    let dir = TempDir::new().unwrap();
    let heat = gen(dir.path(), Family::Heat, 2, 1);
    let mut cfg = base_config(vec![heat], 3);
    cfg.lr = 1e300;
    cfg.noise = 0.0;
    let path = write_config(dir.path(), "run.json", &cfg);
    let o = run(&["train", "--config", p(&path), "--out", p(&dir.path().join("o"))]);
    assert_eq!(o.status.code(), Some(4), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn partial_config_uses_defaults() {
    let dir = TempDir::new().unwrap();
    let heat = gen(dir.path(), Family::Heat, 2, 1);
    let json = format!(
        r#"{{ "model": {{ "history": 2, "height": 8, "width": 8, "embed_dim": 8, "layers": 1 }},
            "datasets": [{:?}], "epochs": 1, "batch_size": 2 }}"#,
        p(&heat)
    );
    let path = dir.path().join("partial.json");
    fs::write(&path, json).unwrap();
    let out = dir.path().join("o");
    let o = run(&["train", "--config", p(&path), "--out", p(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let ckpt = moe_operator::checkpoint::load_checkpoint(&out.join("model.ckpt")).unwrap();
    assert_eq!(ckpt.config.patch, ModelConfig::default().patch);
    assert_eq!(ckpt.config.embed_dim, 8);
}
