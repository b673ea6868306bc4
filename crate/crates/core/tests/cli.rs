//! End-to-end runs of the `mvgrpo` binary on a small configuration.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

const SMALL: &str = r#"
seed = 11
checkpoint_every = 2

[model]
hidden = [16, 16]

[pretrain]
steps = 150
batch_size = 64

[grpo]
iterations = 6
prompts_per_iteration = 2
condition_number_k = 2

[eval]
n_conditions = 6
n_samples = 3

[drift]
n_pairs = 12
bins = 5
"#;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_mvgrpo"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn ok(o: Output) -> Output {
    assert!(o.status.success(), "exit {:?}\nstdout:\n{}\nstderr:\n{}", o.status.code(), stdout(&o), stderr(&o));
    o
}

fn write_config(dir: &Path, name: &str, text: &str) -> PathBuf {
    let path = dir.join(name);
    std::fs::write(&path, text).unwrap();
    path
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Temp dir holding `small.toml` and a pretrained checkpoint in `base/`.
fn pretrained() -> (TempDir, PathBuf, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let base = dir.path().join("base");
    let cfg = write_config(
        dir.path(),
        "small.toml",
        &format!("pretrained_checkpoint = {:?}\n{SMALL}", s(&base.join("pretrained.ckpt"))),
    );
    ok(run(&["pretrain", "--config", s(&cfg), "--out", s(&base)]));
    (dir, cfg, base)
}

fn digest_line(o: &Output) -> String {
    stdout(o).lines().find(|l| l.starts_with("digest ")).unwrap().to_string()
}

#[test]
fn missing_config_names_the_path() {
    let o = run(&["pretrain", "--config", "/nonexistent/exp.toml"]);
    assert_eq!(o.status.code(), Some(4));
    assert!(stderr(&o).contains("/nonexistent/exp.toml"));
}

#[test]
fn zero_sampling_steps_is_a_validation_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "bad.toml", "[sampling]\nsampling_steps = 0\n");
    let o = run(&["pretrain", "--config", s(&cfg), "--out", s(&dir.path().join("o"))]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("sampling.sampling_steps"));
}

#[test]
fn syntax_error_reports_file_and_line() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "bad.toml", "seed = 3\n\n[grpo\n");
    let o = run(&["train", "--config", s(&cfg)]);
    assert_eq!(o.status.code(), Some(2));
    let err = stderr(&o);
    assert!(err.contains("bad.toml") && err.contains("line 3"), "{err}");
}

#[test]
fn pretrain_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "small.toml", SMALL);
    let a = ok(run(&["pretrain", "--config", s(&cfg), "--out", s(&dir.path().join("a"))]));
    let b = ok(run(&["pretrain", "--config", s(&cfg), "--out", s(&dir.path().join("b"))]));
    assert_eq!(digest_line(&a), digest_line(&b));
    let c = ok(run(&["pretrain", "--config", s(&cfg), "--seed", "12", "--out", s(&dir.path().join("c"))]));
    assert_ne!(digest_line(&a), digest_line(&c));
}

#[test]
fn baseline_flag_matches_zero_views() {
    let (dir, cfg, _) = pretrained();
    let flag = dir.path().join("flag");
    let zero = dir.path().join("zero");
    ok(run(&["train", "--config", s(&cfg), "--out", s(&flag), "--baseline"]));
    let text = std::fs::read_to_string(&cfg).unwrap().replace("condition_number_k = 2", "condition_number_k = 0");
    let cfg0 = write_config(dir.path(), "k0.toml", &text);
    ok(run(&["train", "--config", s(&cfg0), "--out", s(&zero)]));
    let a = std::fs::read(flag.join("metrics.jsonl")).unwrap();
    let b = std::fs::read(zero.join("metrics.jsonl")).unwrap();
    assert_eq!(a, b);
    assert_eq!(String::from_utf8(a).unwrap().lines().count(), 6);
}

#[test]
fn interrupted_and_resumed_run_matches_uninterrupted() {
    let (dir, cfg, _) = pretrained();
    let full = dir.path().join("full");
    let part = dir.path().join("part");
    let full_out = ok(run(&["train", "--config", s(&cfg), "--out", s(&full)]));

    ok(run(&["train", "--config", s(&cfg), "--out", s(&part), "--stop-after", "3"]));
    let metrics = std::fs::read_to_string(part.join("metrics.jsonl")).unwrap();
    assert_eq!(metrics.lines().count(), 3);

    let resumed = ok(run(&["train", "--config", s(&cfg), "--out", s(&part), "--resume"]));
    assert_eq!(digest_line(&full_out), digest_line(&resumed));
    assert_eq!(
        std::fs::read(full.join("metrics.jsonl")).unwrap(),
        std::fs::read(part.join("metrics.jsonl")).unwrap()
    );
}

#[test]
fn repeated_training_is_byte_identical() {
    let (dir, cfg, _) = pretrained();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    ok(run(&["train", "--config", s(&cfg), "--out", s(&a)]));
    ok(run(&["train", "--config", s(&cfg), "--out", s(&b)]));
    assert_eq!(
        std::fs::read(a.join("metrics.jsonl")).unwrap(),
        std::fs::read(b.join("metrics.jsonl")).unwrap()
    );
}

#[test]
fn train_without_pretrained_checkpoint_fails() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "small.toml", SMALL);
    let o = run(&["train", "--config", s(&cfg), "--out", s(&dir.path().join("o"))]);
    assert_eq!(o.status.code(), Some(4));
    assert!(stderr(&o).contains("pretrained.ckpt"));
}

#[test]
fn eval_is_deterministic_and_validates() {
    let (_dir, cfg, base) = pretrained();
    let ckpt = base.join("pretrained.ckpt");
    let a = ok(run(&["eval", "--config", s(&cfg), "--checkpoint", s(&ckpt)]));
    let b = ok(run(&["eval", "--config", s(&cfg), "--checkpoint", s(&ckpt)]));
    assert_eq!(a.stdout, b.stdout);
    let report: serde_json::Value = serde_json::from_slice(&a.stdout).unwrap();
    assert_eq!(report["sample_count"], 18);
    assert_eq!(report["per_condition"].as_array().unwrap().len(), 6);

    let o = run(&["eval", "--config", s(&cfg), "--checkpoint", s(&ckpt), "--n-samples", "0"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("n_samples"));
}

#[test]
fn corrupt_checkpoint_is_a_format_error() {
    let (dir, cfg, _) = pretrained();
    let bad = dir.path().join("bad.ckpt");
    std::fs::write(&bad, b"definitely not a checkpoint").unwrap();
    let o = run(&["eval", "--config", s(&cfg), "--checkpoint", s(&bad)]);
    assert_eq!(o.status.code(), Some(4));
    assert!(stderr(&o).contains("checkpoint"));
}

#[test]
fn identity_drift_tables_are_zero() {
    let (dir, cfg, base) = pretrained();
    let out = dir.path().join("drift");
    ok(run(&[
        "drift",
        "--config",
        s(&cfg),
        "--out",
        s(&out),
        "--checkpoint",
        s(&base.join("pretrained.ckpt")),
        "--enhancer",
        "identity",
    ]));
    for step in [0, 2, 4, 6] {
        let table = std::fs::read_to_string(out.join(format!("drift/identity_step{step}.tsv"))).unwrap();
        let rows: Vec<&str> = table.lines().filter(|l| !l.starts_with('#')).skip(1).collect();
        assert_eq!(rows.len(), 5);
        let counts: Vec<usize> = rows.iter().map(|r| r.split('\t').nth(1).unwrap().parse().unwrap()).collect();
        assert_eq!(counts[0], 12);
        assert!(counts[1..].iter().all(|&c| c == 0));
        assert!(table.contains("median=0"));
    }
}

#[test]
fn plotdata_rows_follow_metrics() {
    let (dir, cfg, _) = pretrained();
    let out = dir.path().join("run");
    ok(run(&["train", "--config", s(&cfg), "--out", s(&out), "--stop-after", "4"]));
    let o = ok(run(&["plotdata", "--metrics", s(&out.join("metrics.jsonl"))]));
    let table = stdout(&o);
    let lines: Vec<&str> = table.lines().collect();
    assert_eq!(lines[0], "iteration\tanchor_mean_reward\tloss");
    assert_eq!(lines.len(), 5);
    let metrics = mvgrpo::harness::read_metrics(&out.join("metrics.jsonl")).unwrap();
    for (line, rec) in lines[1..].iter().zip(&metrics) {
        let cols: Vec<&str> = line.split('\t').collect();
        assert_eq!(cols[1].parse::<f64>().unwrap(), rec.anchor_mean_reward);
        assert_eq!(cols[2].parse::<f64>().unwrap(), rec.loss);
    }

    let empty = dir.path().join("empty.jsonl");
    std::fs::write(&empty, "").unwrap();
    let o = ok(run(&["plotdata", "--metrics", s(&empty)]));
    assert_eq!(stdout(&o), "iteration\tanchor_mean_reward\tloss\n");

    let broken = dir.path().join("broken.jsonl");
    let first = std::fs::read_to_string(out.join("metrics.jsonl")).unwrap().lines().next().unwrap().to_string();
    std::fs::write(&broken, format!("{first}\n{first}\nnot json\n")).unwrap();
    let o = run(&["plotdata", "--metrics", s(&broken)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("line 3"));
}

#[test]
fn output_directory_lock_is_exclusive() {
    let (dir, cfg, _) = pretrained();
    let out = dir.path().join("locked");
    std::fs::create_dir_all(&out).unwrap();
    std::fs::write(out.join(".lock"), "1\n").unwrap();
    let o = run(&["train", "--config", s(&cfg), "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(4));
    assert!(stderr(&o).contains("another process"));
    assert!(!out.join("metrics.jsonl").exists());
}
