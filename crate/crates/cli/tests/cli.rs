use std::path::Path;
use std::process::{Command, Output};

const QUICK: &str = r#"{
  "model": {"dim": 8, "num_heads": 2, "pot_layers": 1, "ugrn_layers": 1},
  "train": {"epochs_per_stage": 2, "steps_per_epoch": 2, "batch_size": 8},
  "synth": {"count": 16, "test_count": 8}
}"#;

fn poselift(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_poselift"))
        .env("POSELIFT_OUT", out)
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout:\n{}\nstderr:\n{}",
        out.status,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout.clone()).unwrap()
}

#[test]
fn synth_is_deterministic_per_seed() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    for dir in [&a, &b] {
        ok(&poselift(
            dir.path(),
            &["--seed", "7", "synth", "--count", "100", "--test-count", "5"],
        ));
    }
    let read = |d: &tempfile::TempDir| std::fs::read(d.path().join("synth.train.jsonl")).unwrap();
    assert_eq!(read(&a), read(&b));
    assert_eq!(String::from_utf8(read(&a)).unwrap().lines().count(), 100);
}

#[test]
fn train_resume_and_eval_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("quick.json");
    std::fs::write(&config, QUICK).unwrap();
    let cfg = config.to_str().unwrap();

    let stdout = ok(&poselift(dir.path(), &["--config", cfg, "train", "--stage", "1"]));
    assert!(stdout.contains("stage 1"), "{stdout}");
    let stage1 = dir.path().join("checkpoints/stage1.json");
    assert!(stage1.exists());

    let stdout = ok(&poselift(
        dir.path(),
        &[
            "--config",
            cfg,
            "train",
            "--stage",
            "2",
            "--resume",
            stage1.to_str().unwrap(),
        ],
    ));
    assert!(stdout.contains("stage 2"), "{stdout}");
    let log = std::fs::read_to_string(dir.path().join("train_log.csv")).unwrap();
    assert_eq!(log.lines().count(), 1 + 2 * 4);
    assert!(log.lines().last().unwrap().split(',').nth(2) == Some("2"));

    let stage2 = dir.path().join("checkpoints/stage2.json");
    let stdout = ok(&poselift(
        dir.path(),
        &["--config", cfg, "eval", "--checkpoint", stage2.to_str().unwrap()],
    ));
    assert!(stdout.contains("MPJPE") && stdout.contains("AUC"), "{stdout}");
    assert!(dir.path().join("eval.json").exists());
    let stdout = ok(&poselift(
        dir.path(),
        &[
            "--config",
            cfg,
            "eval",
            "--first-stage-only",
            "--checkpoint",
            stage2.to_str().unwrap(),
        ],
    ));
    assert!(stdout.contains("PCK"));
}

#[test]
fn eval_with_a_mismatched_config_fails() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("quick.json");
    std::fs::write(&config, QUICK).unwrap();
    let cfg = config.to_str().unwrap();
    ok(&poselift(dir.path(), &["--config", cfg, "train", "--stage", "1"]));
    let stage1 = dir.path().join("checkpoints/stage1.json");
    // No config: the desk-preset model does not match the checkpoint.
    let out = poselift(dir.path(), &["eval", "--checkpoint", stage1.to_str().unwrap()]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("checkpoint mismatch"));
}

#[test]
fn bad_arguments_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    assert!(!poselift(dir.path(), &["train", "--stage", "3"]).status.success());
    assert!(!poselift(dir.path(), &["train", "--stage", "2"]).status.success());
    let config = dir.path().join("bad.json");
    std::fs::write(&config, r#"{"train": {"learning_rate": 1}}"#).unwrap();
    assert!(
        !poselift(dir.path(), &["--config", config.to_str().unwrap(), "inspect"])
            .status
            .success()
    );
}

#[test]
fn inspect_lists_submodules_and_total() {
    let dir = tempfile::tempdir().unwrap();
    let stdout = ok(&poselift(dir.path(), &["inspect"]));
    assert!(stdout.contains("pot.layers") && stdout.contains("ugrn.layers"));
    let total: usize = stdout
        .lines()
        .find(|l| l.starts_with("total"))
        .and_then(|l| l.split_whitespace().last())
        .unwrap()
        .parse()
        .unwrap();
    assert_eq!(total, 47_609);
}
