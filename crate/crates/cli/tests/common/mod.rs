#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use ivy_cli::manifest::RunManifest;

pub fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_ivy"));
    c.env_remove("IVY_SEED");
    c
}

pub fn ivy(args: &[&str]) -> Output {
    bin().args(args).output().expect("run ivy")
}

pub fn ok(args: &[&str]) -> Output {
    let o = ivy(args);
    assert!(
        o.status.success(),
        "ivy {args:?} failed:\n{}",
        String::from_utf8_lossy(&o.stderr)
    );
    o
}

pub fn manifest(dir: &Path) -> RunManifest {
    RunManifest::read(&dir.join("manifest.json")).unwrap()
}

pub fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures")
}

pub fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Tiny model flags for fast runs.
pub const TINY: [&str; 8] = ["--d-model", "16", "--layers", "1", "--heads", "2", "--d-ff", "32"];

/// Small corpus written to `dir/corpus.jsonl`.
pub fn write_small_corpus(dir: &Path) -> PathBuf {
    let lines = [
        r#"{"id":"1","source":"t","turns":[{"role":"patient","text":"I have a headache."},{"role":"doctor","text":"Rest and drink water."}]}"#,
        r#"{"id":"2","source":"t","turns":[{"role":"patient","text":"My knee hurts."},{"role":"doctor","text":"Ice it twice a day."}]}"#,
        r#"{"id":"3","source":"t","turns":[{"role":"patient","text":"I cough at night."},{"role":"doctor","text":"Try honey tea."}]}"#,
        r#"{"id":"4","source":"t","turns":[{"role":"patient","text":"Itchy rash."},{"role":"doctor","text":"Use a mild cream."}]}"#,
        r#"{"id":"5","source":"t","turns":[{"role":"patient","text":"I feel dizzy."},{"role":"doctor","text":"Stand up slowly."}]}"#,
        r#"{"id":"6","source":"t","turns":[{"role":"patient","text":"Sore throat."},{"role":"doctor","text":"Gargle salt water."}]}"#,
        r#"{"id":"7","source":"t","turns":[{"role":"doctor","text":"bad order"}]}"#,
    ];
    let p = dir.join("corpus.jsonl");
    std::fs::write(&p, lines.join("\n") + "\n").unwrap();
    p
}

/// Prepared data plus a tiny SFT checkpoint under `dir`.
pub fn tiny_sft(dir: &Path) -> (PathBuf, PathBuf) {
    let corpus = write_small_corpus(dir);
    let data = dir.join("data");
    ok(&["prepare-data", "--in", s(&corpus), "--out", s(&data), "--val-frac", "0.2"]);
    let sft = dir.join("sft");
    let (train, val) = (data.join("train.jsonl"), data.join("val.jsonl"));
    let mut args = vec![
        "train-sft", "--train", s(&train), "--val", s(&val),
        "--out", s(&sft), "--lora-rank", "0", "--lr", "1e-2", "--batch-size", "2", "--ctx", "96",
        "--max-steps", "10",
    ];
    args.extend(TINY);
    ok(&args);
    (data, sft.join("sft.ivy"))
}
