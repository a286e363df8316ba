use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn tiny_config() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/tiny.toml")
}

fn mtpt(exp: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mtpt"))
        .arg("--config")
        .arg(tiny_config())
        .arg("--exp")
        .arg(exp)
        .arg("--quiet")
        .args(args)
        .env_remove("MTPT_TRAIN__STAGE2_STEPS")
        .output()
        .expect("binary runs")
}

fn ok(exp: &Path, args: &[&str]) -> String {
    let out = mtpt(exp, args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn stages(exp: &Path, cmds: &[&str]) {
    for c in cmds {
        ok(exp, &[c]);
    }
}

#[test]
fn eval_of_identical_files_is_zero() {
    let dir = tempfile::tempdir().unwrap();
    let f = dir.path().join("a.hyp");
    fs::write(&f, "u1\t-1.0\t3 4 5\nu2\t-2.0\t1\n").unwrap();
    let out = ok(dir.path(), &["eval", "--hyp", f.to_str().unwrap(), "--ref", f.to_str().unwrap()]);
    assert_eq!(out.trim(), "TER 0.000000");
}

#[test]
fn pretrain_without_codebook_names_the_missing_stage() {
    let dir = tempfile::tempdir().unwrap();
    let out = mtpt(dir.path(), &["pretrain"]);
    assert_eq!(out.status.code(), Some(4));
    assert!(String::from_utf8_lossy(&out.stderr).contains("`synth-data`"));
    ok(dir.path(), &["synth-data"]);
    let out = mtpt(dir.path(), &["pretrain"]);
    assert_eq!(out.status.code(), Some(4));
    assert!(String::from_utf8_lossy(&out.stderr).contains("`train-codebook`"));
    ok(dir.path(), &["train-codebook"]);
    let out = mtpt(dir.path(), &["pretrain"]);
    assert!(String::from_utf8_lossy(&out.stderr).contains("`train-bpe`"));
}

#[test]
fn distinct_diagnostics() {
    let dir = tempfile::tempdir().unwrap();
    let out = mtpt(dir.path(), &["synth-data", "--no-such-flag"]);
    assert_eq!(out.status.code(), Some(2));
    let out = Command::new(env!("CARGO_BIN_EXE_mtpt"))
        .args(["--exp", dir.path().to_str().unwrap(), "synth-data"])
        .env("MTPT_MODEL__NOT_A_KEY", "1")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(3));
    ok(dir.path(), &["synth-data"]);
    assert_eq!(mtpt(dir.path(), &["synth-data"]).status.code(), Some(5));
    fs::write(dir.path().join("data/manifest.tsv"), "tampered").unwrap();
    assert_eq!(mtpt(dir.path(), &["train-codebook"]).status.code(), Some(6));
}

#[test]
fn full_pipeline_emits_ter() {
    let dir = tempfile::tempdir().unwrap();
    let exp = dir.path();
    stages(exp, &["synth-data", "train-codebook", "train-bpe", "encode-units", "train-lm", "pretrain", "finetune", "decode"]);
    let hyp = exp.join("decode/dev.hyp");
    let out = ok(exp, &["eval", "--hyp", hyp.to_str().unwrap(), "--ref", exp.join("decode/dev.ref").to_str().unwrap()]);
    let ter: f64 = out.trim().strip_prefix("TER ").unwrap().parse().unwrap();
    assert!(ter.is_finite() && ter >= 0.0);
    let line = fs::read_to_string(&hyp).unwrap();
    assert_eq!(line.lines().next().unwrap().split('\t').count(), 3);
    assert!(exp.join("pretrain/config.toml").exists());
    assert!(exp.join("pretrain/final.ckpt.sha256").exists());

    ok(exp, &["finetune", "--from-scratch", "--name", "scratch"]);
    ok(exp, &["ablate", "--remove", "pp,s2c"]);
    assert!(fs::read_to_string(exp.join("ablate/report.tsv")).unwrap().contains("-PP&S2C"));
}

#[test]
fn stages_are_reproducible_and_thread_independent() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let cmds = ["synth-data", "train-codebook", "train-bpe", "train-lm"];
    stages(a.path(), &cmds);
    for c in cmds {
        ok(b.path(), &["--threads", "1", c]);
    }
    ok(a.path(), &["--threads", "2", "pretrain"]);
    ok(b.path(), &["--threads", "1", "pretrain"]);
    for f in [
        "data/manifest.tsv",
        "data/features.bin",
        "artifacts/teacher.json",
        "artifacts/codebook.json",
        "artifacts/bpe.json",
        "artifacts/lm.json",
        "pretrain/final.ckpt",
        "pretrain/metrics.jsonl",
    ] {
        assert_eq!(fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap(), "{f}");
    }
}

#[test]
fn resume_from_cli_checkpoint_matches() {
    let dir = tempfile::tempdir().unwrap();
    let exp = dir.path();
    stages(exp, &["synth-data", "train-codebook", "train-bpe", "pretrain"]);
    let ckpt = exp.join("pretrain/ckpt-stage2-0000012.bin");
    ok(exp, &["pretrain", "--name", "resumed", "--resume", ckpt.to_str().unwrap()]);
    assert_eq!(fs::read(exp.join("pretrain/final.ckpt")).unwrap(), fs::read(exp.join("resumed/final.ckpt")).unwrap());
}
