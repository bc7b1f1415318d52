use std::path::Path;
use std::process::{Command, Output};

use voxc_core::train::Checkpoint;

fn voxc(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_voxc"))
        .current_dir(dir)
        .env_remove("VOXC_SEED")
        .args(args)
        .output()
        .unwrap()
}

fn text(bytes: &[u8]) -> String {
    String::from_utf8_lossy(bytes).into_owned()
}

fn ok(dir: &Path, args: &[&str]) -> (String, String) {
    let out = voxc(dir, args);
    let (stdout, stderr) = (text(&out.stdout), text(&out.stderr));
    assert_eq!(out.status.code(), Some(0), "{args:?}\nstdout: {stdout}\nstderr: {stderr}");
    (stdout, stderr)
}

fn small_corpus(dir: &Path) {
    ok(
        dir,
        &["synth", "--out", "corpus", "--speakers", "2", "--utterances", "2", "--min-duration", "0.4", "--max-duration", "0.5"],
    );
}

#[test]
fn unknown_subcommand_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = voxc(dir.path(), &["transmogrify"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(text(&out.stderr).contains("Usage"));
    assert!(out.stdout.is_empty());
}

#[test]
fn eval_without_checkpoint_names_the_missing_input() {
    let dir = tempfile::tempdir().unwrap();
    let out = voxc(dir.path(), &["eval", "--manifest", "m.tsv"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(text(&out.stderr).contains("--checkpoint"));
    assert!(out.stdout.is_empty());
}

#[test]
fn bad_inputs_exit_with_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = voxc(dir.path(), &["pretrain", "--manifest", "missing.tsv", "--out", "x.ckpt"]);
    assert_eq!(out.status.code(), Some(1));
    let out = Command::new(env!("CARGO_BIN_EXE_voxc"))
        .current_dir(dir.path())
        .env("VOXC_SEED", "twelve")
        .args(["synth", "--out", "c"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(text(&out.stderr).contains("VOXC_SEED"));
}

#[test]
fn pretrain_with_zero_steps_writes_a_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    small_corpus(dir.path());
    let (stdout, _) = ok(dir.path(), &["pretrain", "--manifest", "corpus/manifest.tsv", "--out", "pre.ckpt", "--steps", "0"]);
    let ck = Checkpoint::load(dir.path().join("pre.ckpt")).unwrap();
    assert_eq!(ck.pretrain_steps, 0);
    assert_eq!(stdout.trim(), format!("pre.ckpt\t{}", ck.fingerprint()));
}

#[test]
fn config_file_seed_env_and_flags_layer_in_order() {
    let dir = tempfile::tempdir().unwrap();
    small_corpus(dir.path());
    std::fs::write(dir.path().join("cfg.json"), r#"{"seed": 3, "pretrain": {"steps": 2, "batch_size": 2}}"#).unwrap();
    let pretrain = |env_seed: Option<&str>, extra: &[&str], out: &str| {
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_voxc"));
        cmd.current_dir(dir.path()).env_remove("VOXC_SEED");
        if let Some(s) = env_seed {
            cmd.env("VOXC_SEED", s);
        }
        let args = ["--config", "cfg.json", "pretrain", "--manifest", "corpus/manifest.tsv", "--out", out];
        let status = cmd.args(args).args(extra).output().unwrap().status;
        assert!(status.success());
        Checkpoint::load(dir.path().join(out)).unwrap()
    };
    let from_file = pretrain(None, &[], "a.ckpt");
    assert_eq!((from_file.seed, from_file.pretrain_steps), (3, 2));
    let from_env = pretrain(Some("9"), &["--steps", "1"], "b.ckpt");
    assert_eq!((from_env.seed, from_env.pretrain_steps), (9, 1));
    let from_flag = pretrain(Some("9"), &["--seed", "4"], "c.ckpt");
    assert_eq!(from_flag.seed, 4);
    assert_eq!(pretrain(Some("9"), &["--steps", "1"], "d.ckpt").to_bytes(), from_env.to_bytes());
}

#[test]
fn pipeline_keeps_results_on_stdout() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    small_corpus(d);
    let manifest = "corpus/manifest.tsv";
    let mut stderr_all = String::new();
    let mut run = |args: &[&str]| {
        let (out, err) = ok(d, args);
        stderr_all.push_str(&err);
        out
    };
    run(&["pretrain", "--manifest", manifest, "--out", "pre.ckpt", "--steps", "2", "--batch-size", "2", "--metrics", "pre.csv"]);
    run(&["finetune", "--checkpoint", "pre.ckpt", "--manifest", manifest, "--out", "ft.ckpt", "--steps", "2"]);
    let lm = run(&["lm-train", "--manifest", manifest, "--out", "lm.bin"]);
    assert!(lm.starts_with("lm.bin\t"));

    let wav = std::fs::read_dir(d.join("corpus/wav")).unwrap().next().unwrap().unwrap().path();
    let wav = wav.to_str().unwrap();
    let hyp = run(&["decode", "--checkpoint", "ft.ckpt", "--wav", wav, "--lm", "lm.bin", "--beam-width", "4"]);
    assert_eq!(hyp.lines().count(), 1);

    let eval = run(&["eval", "--checkpoint", "ft.ckpt", "--manifest", manifest, "--out", "rep", "--beam-width", "4"]);
    let csv = std::fs::read_to_string(d.join("rep/buckets.csv")).unwrap();
    assert!(csv.starts_with("bucket_start_s,bucket_end_s,count,wer\n"));
    assert!(eval.starts_with(&csv));
    assert!(eval.lines().last().unwrap().starts_with("aggregate_wer,"));
    let dump = std::fs::read_to_string(d.join("rep/decodes.tsv")).unwrap();
    assert_eq!(dump.lines().count(), 1 + 4);

    let enrolled = run(&["enroll", "--checkpoint", "pre.ckpt", "--manifest", manifest, "--out", "profiles.json"]);
    assert_eq!(enrolled.lines().count(), 2);
    let id = run(&["identify", "--checkpoint", "pre.ckpt", "--profiles", "profiles.json", "--wav", wav]);
    let fields: Vec<&str> = id.trim().split('\t').collect();
    assert_eq!(fields.len(), 3);
    assert!(fields[1].parse::<f64>().unwrap().is_finite());

    let mismatch = voxc(d, &["identify", "--checkpoint", "ft.ckpt", "--profiles", "profiles.json", "--wav", wav]);
    assert_eq!(mismatch.status.code(), Some(1));
    assert!(mismatch.stdout.is_empty());

    for result in [id.trim(), "aggregate_wer", "bucket_start_s", enrolled.lines().next().unwrap()] {
        assert!(!stderr_all.contains(result), "result `{result}` leaked to stderr");
    }
}
