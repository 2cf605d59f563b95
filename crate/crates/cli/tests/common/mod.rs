//! Helpers for driving the `kineta` binary from tests.

#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

/// Small settings so every subcommand finishes in seconds.
pub const TINY_CONFIG: &str = r#"
seed = 4

[data]
count = 90

[data.generator]
max_commands = 3
max_duration = 20

[align]
epochs = 2
d_text = 16
hidden = 16

[evaluator]
epochs = 1
max_epochs = 1

[diffusion]
epochs = 1
width = 16
depth = 1
t_steps = 10
batch = 8

[sampler]
rounds = 2
"#;

pub fn kineta(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_kineta"))
        .args(args)
        .env("RUST_LOG", "warn")
        .env_remove("KINETA_LLM_ENDPOINT")
        .env_remove("KINETA_LLM_KEY")
        .output()
        .expect("binary runs")
}

pub fn describe(out: &Output) -> String {
    format!(
        "exit {:?}\nstdout: {}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    )
}

pub fn s(p: &Path) -> &str {
    p.to_str().expect("utf-8 temp path")
}

/// A trained toy pipeline inside a temporary directory.
pub struct Pipeline {
    pub dir: tempfile::TempDir,
    pub config: PathBuf,
    pub data: PathBuf,
    pub test: PathBuf,
    pub aligner: PathBuf,
    pub evaluator: PathBuf,
    pub model: PathBuf,
}

impl Pipeline {
    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    /// Runs `args` with the pipeline config and panics on failure.
    pub fn run(&self, args: &[&str]) -> Output {
        let mut full = vec!["--config", s(&self.config)];
        full.extend_from_slice(args);
        let out = kineta(&full);
        assert!(out.status.success(), "{args:?}: {}", describe(&out));
        out
    }

    pub fn build() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        let config = root.join("tiny.toml");
        std::fs::write(&config, TINY_CONFIG).unwrap();
        let p = Self {
            config,
            data: root.join("data"),
            test: root.join("test"),
            aligner: root.join("aligner.ckpt"),
            evaluator: root.join("evaluator.ckpt"),
            model: root.join("model.ckpt"),
            dir,
        };
        p.run(&["datagen", "--out", s(&p.data)]);
        p.run(&["datagen", "--count", "70", "--seed", "9", "--out", s(&p.test)]);
        p.run(&["train-aligner", "--data", s(&p.data), "--out", s(&p.aligner)]);
        p.run(&["train-evaluator", "--data", s(&p.data), "--out", s(&p.evaluator)]);
        p.run(&["train", "--data", s(&p.data), "--aligner", s(&p.aligner), "--out", s(&p.model)]);
        p
    }
}
