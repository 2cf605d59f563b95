//! Command-line surface. `Cmd` doubles as the replayable record stored in
//! every snapshot.

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};

#[derive(Debug, Parser)]
#[command(name = "kineta", version, about = "Text-to-motion toolkit: data, training, sampling and evaluation")]
pub struct Cli {
    /// Experiment configuration file (TOML).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// Dotted override such as `diffusion.lambda_kp=0`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub overrides: Vec<String>,

    #[command(subcommand)]
    pub command: Cmd,
}

#[derive(Clone, Debug, PartialEq, Subcommand, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub enum Cmd {
    /// Generate a synthetic dataset directory.
    Datagen {
        #[arg(long)]
        count: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the text-to-phrase aligner.
    TrainAligner {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the contrastive evaluator used by `eval`.
    TrainEvaluator {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a diffusion generator against a frozen aligner.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        aligner: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate one motion with classifier-free guidance.
    Sample {
        #[command(flatten)]
        #[serde(flatten)]
        gen: Generation,
    },
    /// Generate with guided denoise and re-diffuse rounds.
    Refine {
        #[command(flatten)]
        #[serde(flatten)]
        gen: Generation,
        #[arg(long)]
        rounds: Option<usize>,
        /// Per-round diagnostics CSV.
        #[arg(long)]
        diagnostics: Option<PathBuf>,
    },
    /// Score systems on a held-out dataset.
    Eval {
        /// `NAME` (checkpoint `NAME.ckpt` under `--models`) or `NAME=PATH`.
        #[arg(long = "system", required = true)]
        systems: Vec<String>,
        /// Systems generated with guided refinement instead of plain sampling.
        #[arg(long = "refine")]
        refined: Vec<String>,
        #[arg(long)]
        models: Option<PathBuf>,
        #[arg(long)]
        evaluator: PathBuf,
        #[arg(long)]
        test: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Per-frame kinematic phrases of a motion file as CSV.
    ExtractKp {
        #[arg(long)]
        motion: PathBuf,
        /// Smooth temperature; hard signs when absent.
        #[arg(long)]
        tau: Option<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Split a prompt into ordered sub-action texts.
    Decompose {
        #[arg(long)]
        text: String,
        /// Use the rule-based splitter even if a language model is configured.
        #[arg(long)]
        rules: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Build a comparison table from metric reports.
    Report {
        #[arg(long = "input", required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Repeat a run from its configuration snapshot.
    #[serde(skip)]
    Rerun {
        #[arg(long)]
        snapshot: PathBuf,
        /// Write to a different location than the original run.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Debug, PartialEq, clap::Args, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Generation {
    /// Diffusion checkpoint.
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub prompt: String,
    /// Decomposed parts in order; derived from the prompt when absent.
    #[arg(long = "part")]
    #[serde(default)]
    pub parts: Vec<String>,
    #[arg(long)]
    pub frames: usize,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub guidance: Option<f64>,
    #[arg(long)]
    pub out: PathBuf,
}

impl Cmd {
    pub fn name(&self) -> &'static str {
        match self {
            Cmd::Datagen { .. } => "datagen",
            Cmd::TrainAligner { .. } => "train-aligner",
            Cmd::TrainEvaluator { .. } => "train-evaluator",
            Cmd::Train { .. } => "train",
            Cmd::Sample { .. } => "sample",
            Cmd::Refine { .. } => "refine",
            Cmd::Eval { .. } => "eval",
            Cmd::ExtractKp { .. } => "extract-kp",
            Cmd::Decompose { .. } => "decompose",
            Cmd::Report { .. } => "report",
            Cmd::Rerun { .. } => "rerun",
        }
    }

    /// Main output and whether it is a directory.
    pub fn output(&self) -> Option<(&Path, bool)> {
        match self {
            Cmd::Datagen { out, .. } | Cmd::Report { out, .. } => Some((out, true)),
            Cmd::TrainAligner { out, .. }
            | Cmd::TrainEvaluator { out, .. }
            | Cmd::Train { out, .. }
            | Cmd::Eval { out, .. }
            | Cmd::ExtractKp { out, .. } => Some((out, false)),
            Cmd::Sample { gen } | Cmd::Refine { gen, .. } => Some((&gen.out, false)),
            Cmd::Decompose { out, .. } => out.as_deref().map(|p| (p, false)),
            Cmd::Rerun { .. } => None,
        }
    }

    pub fn set_output(&mut self, path: PathBuf) {
        match self {
            Cmd::Datagen { out, .. }
            | Cmd::Report { out, .. }
            | Cmd::TrainAligner { out, .. }
            | Cmd::TrainEvaluator { out, .. }
            | Cmd::Train { out, .. }
            | Cmd::Eval { out, .. }
            | Cmd::ExtractKp { out, .. } => *out = path,
            Cmd::Sample { gen } | Cmd::Refine { gen, .. } => gen.out = path,
            Cmd::Decompose { out, .. } => *out = Some(path),
            Cmd::Rerun { out, .. } => *out = Some(path),
        }
    }
}
