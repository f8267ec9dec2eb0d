use std::path::Path;
use std::process::{Command, Output};

use lora2::adapter::{AdaptiveLoraLayer, FrozenLinear, LayerKind};
use lora2::autodiff::Tensor;
use lora2::checkpoint::save_checkpoint;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn lora2(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lora2")).args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn gradcheck_passes() {
    let o = lora2(&["gradcheck", "--trials", "5"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("PASS"));
}

#[test]
fn report_prints_rank_and_size() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("q.alr2");
    let base = FrozenLinear::new("q", LayerKind::SelfAttnQ, Tensor::identity(8)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let layer = AdaptiveLoraLayer::init_adapter(base, 2, 0.9, 16, &mut rng).unwrap();
    assert_eq!(save_checkpoint(&[layer], &path).unwrap(), 165);

    let o = lora2(&["report", "--ckpt", path.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0));
    let out = stdout(&o);
    assert!(out.contains("D=2"), "{out}");
    assert!(out.contains("165 bytes"), "{out}");
}

fn write(path: &Path, text: &str) {
    std::fs::write(path, text).unwrap();
}

#[test]
fn zero_step_train_writes_header_only_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    write(&cfg, "base=desk\nsteps=0\nd_model=8\nk_tokens=2\nd_cond=4\nr_max=16\nplanted_ranks=1,1,1,1,1,1,1,1,1\n");
    let out = dir.path().join("out");
    let o = lora2(&["train", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap(), "--seed", "3"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let metrics = std::fs::read_to_string(out.join("metrics.csv")).unwrap();
    assert_eq!(metrics, "step,total,mse,reg,entropy,weight,active_params,bytes\n");
    assert!(out.join("adapter.alr2").exists());
    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["config"]["seed"], 3);
}

#[test]
fn small_sweep_writes_table() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    write(&cfg, "base=desk\nsteps=3\nbatch_size=4\nd_model=8\nk_tokens=2\nd_cond=4\nr_max=16\nr_init=2\n");
    let out = dir.path().join("sweep");
    let o = lora2(&["sweep", "--config", cfg.to_str().unwrap(), "--ranks", "1,2,4", "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let table = std::fs::read_to_string(out.join("sweep.csv")).unwrap();
    assert_eq!(table.lines().count(), 5);
    assert!(table.lines().last().unwrap().starts_with("adaptive,"));
}

#[test]
fn usage_and_validation_errors_exit_one() {
    assert_eq!(lora2(&["train", "--bogus"]).status.code(), Some(1));
    assert_eq!(lora2(&[]).status.code(), Some(1));

    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.cfg");
    write(&cfg, "q=0.9\nnot_a_key=1\n");
    let o = lora2(&["train", "--config", cfg.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("line 2"));

    write(&cfg, "q=1.5\n");
    let o = lora2(&["train", "--config", cfg.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn runtime_failures_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("junk.alr2");
    write(&path, "NOPE00000000");
    assert_eq!(lora2(&["report", "--ckpt", path.to_str().unwrap()]).status.code(), Some(2));
    let missing = dir.path().join("missing.cfg");
    let o = lora2(&["train", "--config", missing.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
}
