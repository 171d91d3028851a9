use std::path::{Path, PathBuf};
use std::process::Command;

use driftbench_cli::{run, EXIT_OK, EXIT_RUNTIME, EXIT_USAGE};

const TINY: &str = r#"
strategies = ["BASE"]
seeds = [0]

[corpus.synthetic]
num_posts = 600

[adapt.classifier]
epochs = 1
hidden = 8

[adapt.classifier.encoder]
embed_dim = 4
"#;

fn cli(args: &[&str]) -> i32 {
    run(std::iter::once("driftbench").chain(args.iter().copied()))
}

fn write_config(dir: &Path, text: &str) -> PathBuf {
    let p = dir.join("c.toml");
    std::fs::write(&p, text).unwrap();
    p
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(cli(&["eval", "--out", "x"]), EXIT_USAGE);
    assert_eq!(cli(&["eval", "--bogus"]), EXIT_USAGE);
    assert_eq!(cli(&["frobnicate"]), EXIT_USAGE);
    assert_eq!(cli(&[]), EXIT_USAGE);
    assert_eq!(cli(&["adapt", "--config", "c.toml", "--out", "o", "--strategy", "XYZ"]), EXIT_USAGE);
    assert_eq!(cli(&["eval", "--config", "c.toml", "--set", "novalue"]), EXIT_USAGE);
    assert_eq!(cli(&["--help"]), EXIT_OK);
}

#[test]
fn runtime_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("o");
    assert_eq!(cli(&["eval", "--config", "/nonexistent/c.toml", "--out", s(&out)]), EXIT_RUNTIME);
    let cfg = write_config(dir.path(), TINY);
    assert_eq!(
        cli(&["eval", "--config", s(&cfg), "--out", s(&out), "--set", "adapt.classifier.epochs=0"]),
        EXIT_RUNTIME
    );
}

#[test]
fn binary_exit_codes() {
    let bin = env!("CARGO_BIN_EXE_driftbench");
    let status = Command::new(bin).args(["eval"]).output().unwrap();
    assert_eq!(status.status.code(), Some(EXIT_USAGE));
    assert!(String::from_utf8_lossy(&status.stderr).contains("--config"));
    let status = Command::new(bin).args(["--version"]).output().unwrap();
    assert_eq!(status.status.code(), Some(EXIT_OK));
}

#[test]
fn generate_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.jsonl");
    let b = dir.path().join("b.jsonl");
    let c = dir.path().join("c.jsonl");
    assert_eq!(cli(&["generate", "--seed", "1", "--drift", "0.5", "--out", s(&a)]), EXIT_OK);
    assert_eq!(cli(&["generate", "--seed", "1", "--drift", "0.5", "--out", s(&b)]), EXIT_OK);
    assert_eq!(cli(&["generate", "--seed", "2", "--drift", "0.5", "--out", s(&c)]), EXIT_OK);
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    assert_ne!(std::fs::read(&a).unwrap(), std::fs::read(&c).unwrap());
}

#[test]
fn eval_writes_report_and_honors_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let out = dir.path().join("eval");
    assert_eq!(cli(&["eval", "--config", s(&cfg), "--out", s(&out), "--seed", "5"]), EXIT_OK);
    let csv = std::fs::read_to_string(out.join("metrics.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next().unwrap(), "strategy,seed,slice,accuracy,n_test,config_hash");
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 5);
    assert!(rows.iter().all(|r| r.starts_with("BASE,5,")));
    let json: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("metrics.json")).unwrap()).unwrap();
    assert!(json["BASE"]["t4"]["mean"].is_number());
    assert!(json["BASE"]["t4"]["per_seed"]["5"].is_number());
    assert!(out.join("metrics_table.md").exists());
}

#[test]
fn train_then_diagnose() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let bundle = dir.path().join("bundle");
    assert_eq!(cli(&["train", "--config", s(&cfg), "--out", s(&bundle)]), EXIT_OK);
    assert!(bundle.join("bundle.json").exists());
    let diag = dir.path().join("diag");
    let args = [
        "diagnose", "--config", s(&cfg), "--bundle", s(&bundle), "--out", s(&diag), "--set", "adapt.vae.epochs=1",
    ];
    assert_eq!(cli(&args), EXIT_OK);
    assert!(diag.join("overlap.csv").exists() && diag.join("topics.json").exists());
    // Attention export needs the attention encoder.
    let mut with_attn = args.to_vec();
    with_attn.extend(["--attention", "p000000"]);
    assert_eq!(cli(&with_attn), EXIT_RUNTIME);
}

#[test]
fn label_quality_on_file_corpus_is_unsupported() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("corpus.jsonl");
    assert_eq!(cli(&["generate", "--seed", "1", "--out", s(&corpus)]), EXIT_OK);
    let text = TINY.replace(
        "[corpus.synthetic]\nnum_posts = 600",
        "[corpus]\npath = \"corpus.jsonl\"",
    );
    let cfg = write_config(dir.path(), &text);
    let out = dir.path().join("ab");
    assert_eq!(
        cli(&["ablate", "--config", s(&cfg), "--out", s(&out), "--kind", "label-quality"]),
        EXIT_RUNTIME
    );
    assert_eq!(cli(&["split", "--config", s(&cfg), "--out", s(&out)]), EXIT_OK);
    for name in ["t0_train", "t0_val", "t0_test", "t1", "t2", "t3", "t4"] {
        assert!(out.join(format!("{name}.jsonl")).exists(), "{name}");
    }
}
