use spgnet::cli::{dispatch, EXIT_CONFIG, EXIT_RUNTIME};
use spgnet::config::{apply_override, ExperimentConfig};
use std::path::{Path, PathBuf};

fn run(args: &[&str]) -> (i32, String) {
    let mut out = Vec::new();
    let code = dispatch(std::iter::once("spgnet").chain(args.iter().copied()), &mut out);
    (code, String::from_utf8(out).unwrap())
}

fn repo_configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

const TINY: &str = r#"
include = ["shared.toml"]

[network]
num_classes = 3

[[network.stages]]
encoder = { depth = 18, width = "1/8" }
decoder = { channels = 8 }
link = { kind = "spg", variant = "sigmoid" }

[[network.stages]]
encoder = { depth = 18, width = "1/8" }
decoder = { channels = 8 }

[train]
max_iter = 2
"#;

const SHARED: &str = r#"
[train]
batch_size = 2
max_iter = 100
checkpoint_every = 1

[train.augment]
crop = 32

[paths]
data_uri = "synth://0/4/3/32"
eval_split = "train"
"#;

fn write_tiny(dir: &Path) -> PathBuf {
    std::fs::write(dir.join("shared.toml"), SHARED).unwrap();
    let p = dir.join("tiny.toml");
    std::fs::write(&p, TINY).unwrap();
    p
}

#[test]
fn repository_configs_load() {
    for name in ["base.toml", "desk_synthetic.toml", "one_stage_r18.toml", "two_stage_r18.toml", "two_stage_r50.toml"] {
        let p = repo_configs().join(name);
        let r = ExperimentConfig::load(&p, &[]);
        assert_eq!(r.is_ok(), name != "base.toml", "{name}: {r:?}");
    }
    let c = ExperimentConfig::load(&repo_configs().join("two_stage_r18.toml"), &[]).unwrap();
    assert_eq!(c.train.checkpoint_every, 5000);
    assert_eq!(c.paths.output_dir, "runs/two_stage_r18");
    assert_eq!(c.network.stages.len(), 2);
}

#[test]
fn includes_and_overrides_are_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let p = write_tiny(dir.path());
    let a = ExperimentConfig::load(&p, &[]).unwrap();
    let b = ExperimentConfig::load(&p, &[]).unwrap();
    assert_eq!(a.digest(), b.digest());
    assert_eq!(a.digest().len(), 64);
    // the including file wins, included tables merge
    assert_eq!((a.train.max_iter, a.train.batch_size, a.train.augment.crop), (2, 2, 32));
    let o = ExperimentConfig::load(&p, &["train.seed=7".into(), "train.seed=8".into()]).unwrap();
    assert_eq!(o.train.seed, 8);
    assert_ne!(o.digest(), a.digest());
    let round = ExperimentConfig::parse(&a.to_toml()).unwrap();
    assert_eq!(round, a);
    assert_eq!(round.digest(), a.digest());

    assert!(ExperimentConfig::load(&p, &["train.seed".into()]).is_err());
    assert!(ExperimentConfig::load(&p, &["train..seed=1".into()]).is_err());
    assert!(ExperimentConfig::load(&p, &["train.bogus=1".into()]).is_err());
    assert!(ExperimentConfig::load(&p, &["train.power=2.0".into()]).is_err());
    let mut v = toml::Value::Table(toml::Table::new());
    apply_override(&mut v, "a.b.c=\"x\"").unwrap();
    assert_eq!(v["a"]["b"]["c"].as_str(), Some("x"));
    assert!(apply_override(&mut v, "a.b.c.d=1").is_err());
}

#[test]
fn include_cycles_are_config_errors() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("a.toml"), "include = \"b.toml\"").unwrap();
    std::fs::write(dir.path().join("b.toml"), "include = \"a.toml\"").unwrap();
    assert!(ExperimentConfig::load(&dir.path().join("a.toml"), &[]).is_err());
}

#[test]
fn usage_and_config_errors_exit_two() {
    assert_eq!(run(&["frobnicate"]).0, EXIT_CONFIG);
    assert_eq!(run(&[]).0, EXIT_CONFIG);
    assert_eq!(run(&["profile", "--config", "/nonexistent.toml", "--input-size", "64x64"]).0, EXIT_CONFIG);
    let cfg = repo_configs().join("two_stage_r18.toml");
    let cfg = cfg.to_str().unwrap();
    assert_eq!(run(&["profile", "--config", cfg, "--input-size", "64"]).0, EXIT_CONFIG);
    assert_eq!(run(&["--help"]).0, 0);
}

#[test]
fn runtime_failures_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let junk = dir.path().join("junk.spg");
    std::fs::write(&junk, b"not a checkpoint").unwrap();
    let (code, _) = run(&["eval", "--checkpoint", junk.to_str().unwrap(), "--data", "synth://0/2/3/32"]);
    assert_eq!(code, EXIT_RUNTIME);
    let missing = dir.path().join("nope.spg");
    assert_eq!(run(&["eval", "--checkpoint", missing.to_str().unwrap()]).0, EXIT_RUNTIME);
}

#[test]
fn profile_prints_a_table_or_json() {
    let cfg = repo_configs().join("two_stage_r50.toml");
    let (code, text) = run(&["profile", "--config", cfg.to_str().unwrap(), "--input-size", "1024x2048"]);
    assert_eq!(code, 0);
    assert!(text.starts_with("input 1024x2048: "), "{text}");
    let (code, json) = run(&["profile", "--config", cfg.to_str().unwrap(), "--input-size", "64x128", "--json"]);
    assert_eq!(code, 0);
    let v: serde_json::Value = serde_json::from_str(&json).unwrap();
    assert_eq!(v["input_size"], serde_json::json!([64, 128]));
}

#[test]
fn train_eval_visualize_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_tiny(dir.path());
    let run_dir = dir.path().join("run");
    let (code, text) = run(&[
        "--seed",
        "5",
        "train",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        run_dir.to_str().unwrap(),
    ]);
    assert_eq!(code, 0, "{text}");
    let summary: serde_json::Value = serde_json::from_str(&text).unwrap();
    assert_eq!(summary["iterations"], 2);
    assert_eq!(summary["checkpoints"].as_array().unwrap().len(), 3);
    let saved = ExperimentConfig::parse(&std::fs::read_to_string(run_dir.join("config.toml")).unwrap()).unwrap();
    assert_eq!(saved.train.seed, 5);
    assert_eq!(summary["config_digest"], saved.digest());
    assert_eq!(std::fs::read_to_string(run_dir.join("metrics.jsonl")).unwrap().lines().count(), 2);

    let ck = run_dir.join("ckpt_00000002.spg");
    let report = dir.path().join("report.json");
    let (code, text) = run(&[
        "eval",
        "--checkpoint",
        ck.to_str().unwrap(),
        "--scales",
        "0.75,1.0",
        "--flip",
        "--out",
        report.to_str().unwrap(),
    ]);
    assert_eq!(code, 0, "{text}");
    let v: serde_json::Value = serde_json::from_str(&text).unwrap();
    assert_eq!(v["samples"], 4);
    assert_eq!(v["strategy"]["flip"], true);
    assert!((0.0..=1.0).contains(&v["miou"].as_f64().unwrap()));
    assert_eq!(std::fs::read_to_string(&report).unwrap().trim(), text.trim());

    // resuming the finished run with a longer schedule is a config change, not a plan change
    let (code, text) = run(&[
        "train",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        run_dir.to_str().unwrap(),
        "--resume",
        run_dir.join("ckpt_00000001.spg").to_str().unwrap(),
    ]);
    assert_eq!(code, 0, "{text}");
    let other = dir.path().join("other.toml");
    std::fs::write(&other, TINY.replace("channels = 8", "channels = 16")).unwrap();
    let (code, _) = run(&[
        "train",
        "--config",
        other.to_str().unwrap(),
        "--resume",
        ck.to_str().unwrap(),
        "--out",
        dir.path().join("x").to_str().unwrap(),
    ]);
    assert_eq!(code, EXIT_CONFIG);

    let vis = dir.path().join("vis");
    let (code, text) = run(&[
        "visualize",
        "--checkpoint",
        ck.to_str().unwrap(),
        "--image",
        "synth-0-4-3-32-1",
        "--class",
        "class1,2",
        "--topk",
        "4",
        "--out",
        vis.to_str().unwrap(),
    ]);
    assert_eq!(code, 0, "{text}");
    assert_eq!(text.lines().count(), 5);
    assert!(vis.join("class02_heatmap.png").exists());
    let (code, _) = run(&[
        "visualize",
        "--checkpoint",
        ck.to_str().unwrap(),
        "--image",
        "synth-0-4-3-32-1",
        "--class",
        "sky",
        "--out",
        vis.to_str().unwrap(),
    ]);
    assert_eq!(code, EXIT_CONFIG);
}
