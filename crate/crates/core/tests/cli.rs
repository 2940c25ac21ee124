use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn prepo(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_prepo"))
        .current_dir(dir)
        .args(args)
        .output()
        .unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

const SMALL: &str = r#"
name = "small"
output_dir = "runs"

[dataset]
n_prompts = 40

[train]
total_steps = 4
candidate_batch = 16
sub_batch = 4
group_size = 4
mini_batch = 2
checkpoint_every = 4
eval_every = 2

[eval]
k = 2
n_prompts = 10
"#;

fn write_spec(dir: &Path, name: &str, text: &str) {
    fs::write(dir.join(name), text).unwrap();
}

#[test]
fn usage_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&prepo(dir.path(), &[])), 2);
    assert_eq!(code(&prepo(dir.path(), &["train"])), 2);
    assert_eq!(code(&prepo(dir.path(), &["--help"])), 0);
}

#[test]
fn missing_spec_exits_5() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&prepo(dir.path(), &["train", "nope.toml"])), 5);
}

#[test]
fn malformed_spec_exits_2_without_run_dir() {
    let dir = tempfile::tempdir().unwrap();
    write_spec(dir.path(), "bad.toml", &SMALL.replace("total_steps", "total_stepz"));
    let out = prepo(dir.path(), &["train", "bad.toml"]);
    assert_eq!(code(&out), 2);
    assert!(!dir.path().join("runs").exists());
    write_spec(dir.path(), "broken.toml", "name = \n");
    assert_eq!(code(&prepo(dir.path(), &["train", "broken.toml"])), 2);
}

#[test]
fn oversized_window_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    write_spec(dir.path(), "k.toml", &SMALL.replace("sub_batch = 4", "sub_batch = 32"));
    let out = prepo(dir.path(), &["train", "k.toml"]);
    assert_eq!(code(&out), 3);
    assert!(String::from_utf8_lossy(&out.stderr).contains("K <= |B|"));
    assert!(!dir.path().join("runs").join("small").exists());
}

#[test]
fn duplicate_run_name_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    write_spec(dir.path(), "s.toml", SMALL);
    assert_eq!(code(&prepo(dir.path(), &["train", "s.toml"])), 0);
    assert_eq!(code(&prepo(dir.path(), &["train", "s.toml"])), 3);
}

#[test]
fn divergence_exits_4_and_keeps_last_good() {
    let dir = tempfile::tempdir().unwrap();
    let text = format!("{SMALL}\n[train.optimizer]\nlearning_rate = 1e308\n");
    write_spec(dir.path(), "nan.toml", &text);
    assert_eq!(code(&prepo(dir.path(), &["train", "nan.toml"])), 4);
    let run = dir.path().join("runs").join("small");
    assert!(run.join("checkpoint_last_good").exists());
    assert!(run.join("nan_dump.json").exists());
}

#[test]
fn train_writes_artifacts_and_echo_reproduces() {
    let dir = tempfile::tempdir().unwrap();
    write_spec(dir.path(), "s.toml", SMALL);
    assert_eq!(code(&prepo(dir.path(), &["--sequential", "train", "s.toml"])), 0);
    let run = dir.path().join("runs").join("small");
    for f in [
        "config_echo.toml",
        "run_meta.json",
        "metrics.jsonl",
        "ppl_trace.csv",
        "weights_hist.csv",
        "checkpoint_4",
        "eval.json",
    ] {
        assert!(run.join(f).exists(), "{f} missing");
    }
    let echo = run.join("config_echo.toml");
    let out = prepo(dir.path(), &["--out", "again", "train", echo.to_str().unwrap()]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let first = fs::read(run.join("metrics.jsonl")).unwrap();
    let second = fs::read(dir.path().join("again").join("small").join("metrics.jsonl")).unwrap();
    assert_eq!(first, second);
}

#[test]
fn seed_override_changes_the_run() {
    let dir = tempfile::tempdir().unwrap();
    write_spec(dir.path(), "s.toml", SMALL);
    assert_eq!(code(&prepo(dir.path(), &["--out", "a", "train", "s.toml"])), 0);
    assert_eq!(code(&prepo(dir.path(), &["--out", "b", "--seed", "9", "train", "s.toml"])), 0);
    let a = fs::read(dir.path().join("a/small/metrics.jsonl")).unwrap();
    let b = fs::read(dir.path().join("b/small/metrics.jsonl")).unwrap();
    assert_ne!(a, b);
    let echo = fs::read_to_string(dir.path().join("b/small/config_echo.toml")).unwrap();
    assert!(echo.contains("seed = 9"));
}

#[test]
fn eval_analyze_and_compare() {
    let dir = tempfile::tempdir().unwrap();
    write_spec(dir.path(), "s.toml", SMALL);
    write_spec(dir.path(), "t.toml", &SMALL.replace("name = \"small\"", "name = \"other\""));
    assert_eq!(code(&prepo(dir.path(), &["train", "s.toml"])), 0);
    assert_eq!(code(&prepo(dir.path(), &["--seed", "3", "train", "t.toml"])), 0);

    let ckpt = "runs/small/checkpoint_4";
    let out = prepo(dir.path(), &["eval", "s.toml", "--checkpoint", ckpt]);
    assert_eq!(code(&out), 0);
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!(report["pass_at_1_avg_k"].as_f64().is_some());

    let out = prepo(dir.path(), &["--out", "ppl", "analyze-ppl", "s.toml", "--checkpoint", ckpt, "--k", "2"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    for f in ["per_prompt.csv", "buckets.csv", "summary.json"] {
        assert!(dir.path().join("ppl").join(f).exists());
    }
    let rows = fs::read_to_string(dir.path().join("ppl/per_prompt.csv")).unwrap();
    assert_eq!(rows.lines().count(), 41);

    let out = prepo(
        dir.path(),
        &["compare", "runs/small", "runs/other", "--metric", "mean_reward", "--threshold", "2.0"],
    );
    assert_eq!(code(&out), 0);
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.starts_with("rollouts,small,other\n"));
    assert!(text.contains("small,2,not_reached"));

    let out = prepo(dir.path(), &["compare", "runs/small", "runs/missing"]);
    assert_eq!(code(&out), 5);
}

#[test]
fn checkpoint_vocab_mismatch_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    write_spec(dir.path(), "s.toml", SMALL);
    assert_eq!(code(&prepo(dir.path(), &["train", "s.toml"])), 0);
    let other = SMALL.replace("n_prompts = 40", "n_prompts = 40\nmodulus = 7");
    write_spec(dir.path(), "m7.toml", &other);
    let out = prepo(dir.path(), &["eval", "m7.toml", "--checkpoint", "runs/small/checkpoint_4"]);
    assert_eq!(code(&out), 3);
}

#[test]
fn golden_requires_force_to_overwrite() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("g.json");
    let p = path.to_str().unwrap();
    assert_eq!(code(&prepo(dir.path(), &["--out", p, "golden"])), 0);
    assert_eq!(code(&prepo(dir.path(), &["--out", p, "golden"])), 3);
    assert_eq!(code(&prepo(dir.path(), &["--out", p, "golden", "--force"])), 0);
    let stored: serde_json::Value = serde_json::from_str(&fs::read_to_string(&path).unwrap()).unwrap();
    assert_eq!(stored["rollouts"].as_array().unwrap().len(), 12);
}

#[test]
fn dataset_export_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    write_spec(dir.path(), "s.toml", SMALL);
    assert_eq!(code(&prepo(dir.path(), &["--out", "d.txt", "dataset", "s.toml"])), 0);
    let text = fs::read_to_string(dir.path().join("d.txt")).unwrap();
    let parsed = prepo::taskgen::read_dataset(text.as_bytes(), &prepo::Vocab::new(5).unwrap()).unwrap();
    assert_eq!(parsed.len(), 40);
}
