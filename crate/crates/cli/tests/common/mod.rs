#![allow(dead_code)]

use std::path::Path;
use std::process::{Command, Output};

pub fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_spkdistill"))
}

/// Runs the binary with `args`, returning its exit code and output.
pub fn run(args: &[&str]) -> (i32, Output) {
    let out = bin().args(args).output().expect("binary runs");
    (out.status.code().expect("exited normally"), out)
}

pub fn run_ok(args: &[&str]) -> Output {
    let (code, out) = run(args);
    assert_eq!(code, 0, "{args:?} failed:\n{}", String::from_utf8_lossy(&out.stderr));
    out
}

/// Five source speakers, three fine-tuning and three evaluation speakers,
/// two epochs per stage.
pub const TINY_CONFIG: &str = r#"{
  "seed": 5,
  "corpus": {
    "feature_dim": 8,
    "source_speakers": 5,
    "source_utts_per_speaker": 4,
    "target_speakers": 3,
    "target_utts_per_speaker": 4,
    "eval_speakers": 3,
    "long_frames": [60, 90],
    "short_frames": [20, 40],
    "target_trials": 12,
    "nontarget_trials": 30
  },
  "encoder": {"input_dim": 8, "block_widths": [8, 8], "embedding_dim": 8},
  "teacher": {"epochs": 2, "batch_size": 8},
  "student": {"train": {"epochs": 2, "batch_size": 8, "crop_frames": 20}},
  "finetune": {"epochs": 2, "batch_size": 8, "crop_frames": 20, "selection": "all"},
  "backend": {"lda_dim": 2}
}
"#;

pub fn write_config(dir: &Path) -> String {
    let path = dir.join("config.json");
    std::fs::write(&path, TINY_CONFIG).unwrap();
    path.to_str().unwrap().to_owned()
}

/// Runs every stage under `root`, returning the evaluation directory.
pub fn pipeline(root: &Path, config: &str) -> std::path::PathBuf {
    let p = |s: &str| root.join(s).to_str().unwrap().to_owned();
    run_ok(&["gen-data", "--config", config, "--out", &p("data")]);
    run_ok(&["train-teacher", "--config", config, "--data", &p("data"), "--out", &p("teacher")]);
    run_ok(&[
        "train-student",
        "--config",
        config,
        "--data",
        &p("data"),
        "--teacher",
        &p("teacher/model.spkm"),
        "--out",
        &p("student"),
    ]);
    run_ok(&[
        "finetune",
        "--config",
        config,
        "--data",
        &p("data"),
        "--model",
        &p("student/model.spkm"),
        "--out",
        &p("finetune"),
    ]);
    run_ok(&[
        "evaluate",
        "--config",
        config,
        "--data",
        &p("data"),
        "--model",
        &p("finetune/model.spkm"),
        "--out",
        &p("eval"),
    ]);
    root.join("eval")
}
