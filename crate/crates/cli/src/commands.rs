//! One function per subcommand. Each writes its snapshot first and marks
//! file outputs incomplete until they are fully written.

use std::path::{Path, PathBuf};

use kineta::alignment::{train_aligner, AlignerModel};
use kineta::diffusion::{refine, sample, train_diffusion, write_diagnostics, DiffusionModel};
use kineta::evaluation::{
    compare, evaluate_model, evaluate_real, read_reports, render_table, train_evaluator, write_reports_csv,
    write_reports_toml, write_series, EvaluatorModel, MetricReport, TestSet,
};
use kineta::kp::{extract_hard, extract_smooth};
use kineta::motion::{generate_dataset, read_dataset, read_motion_sequence, write_dataset, write_generated_motion};
use kineta::text::{decompose_llm, decompose_rules, DecomposedPrompt, HttpTransport, LlmConfig, Source};
use kineta::{Error, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use crate::cli::{Cmd, Generation};
use crate::config::{ExperimentConfig, Snapshot};

/// Emits one machine-readable line on stdout.
fn metric(value: serde_json::Value) {
    println!("METRIC {value}");
}

fn marker_for(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".INCOMPLETE");
    PathBuf::from(s)
}

/// Runs `f` with an `<out>.INCOMPLETE` marker beside the output, removed
/// only when `f` succeeds.
fn guarded<T>(out: &Path, f: impl FnOnce() -> Result<T>) -> Result<T> {
    let marker = marker_for(out);
    if let Some(dir) = marker.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(&marker, b"run in progress\n").map_err(|e| Error::io(&marker, e))?;
    let value = f()?;
    std::fs::remove_file(&marker).map_err(|e| Error::io(&marker, e))?;
    Ok(value)
}

fn require(path: &Path, what: &str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::validation(format!("{what} {} does not exist", path.display())))
    }
}

/// Folds command-line flags that mirror config keys into the config.
pub fn apply_flags(cmd: &Cmd, cfg: &mut ExperimentConfig) {
    match cmd {
        Cmd::Datagen { count, seed, .. } => {
            if let Some(c) = count {
                cfg.data.count = *c;
            }
            if let Some(s) = seed {
                cfg.seed = *s;
            }
        }
        Cmd::Sample { gen } | Cmd::Refine { gen, .. } => {
            if let Some(s) = gen.seed {
                cfg.seed = s;
            }
            if let Some(w) = gen.guidance {
                cfg.sampler.guidance = w;
            }
            if let Cmd::Refine { rounds: Some(r), .. } = cmd {
                cfg.sampler.rounds = *r;
            }
        }
        Cmd::Eval { seed: Some(s), .. } => cfg.seed = *s,
        _ => {}
    }
}

/// Checks inputs and settles anything nondeterministic (the language-model
/// split of a prompt) so the snapshot replays exactly.
pub fn prepare(cmd: &mut Cmd) -> Result<()> {
    match cmd {
        Cmd::TrainAligner { data, .. } | Cmd::TrainEvaluator { data, .. } => require(data, "dataset"),
        Cmd::Train { data, aligner, .. } => {
            require(data, "dataset")?;
            require(aligner, "aligner checkpoint")
        }
        Cmd::Sample { gen } | Cmd::Refine { gen, .. } => {
            require(&gen.model, "model checkpoint")?;
            if gen.frames < 2 {
                return Err(Error::validation("--frames must be at least 2"));
            }
            if gen.parts.is_empty() {
                gen.parts = decompose(&gen.prompt, false)?.parts;
            }
            Ok(())
        }
        Cmd::Eval {
            systems,
            models,
            evaluator,
            test,
            refined,
            ..
        } => {
            require(evaluator, "evaluator checkpoint")?;
            require(test, "test dataset")?;
            let resolved = systems
                .iter()
                .map(|s| system_path(s, models.as_deref()))
                .collect::<Result<Vec<_>>>()?;
            for (_, p) in &resolved {
                require(p, "model checkpoint")?;
            }
            if let Some(r) = refined.iter().find(|r| !resolved.iter().any(|(n, _)| n == *r)) {
                return Err(Error::validation(format!("--refine {r} names no --system")));
            }
            Ok(())
        }
        Cmd::ExtractKp { motion, tau, .. } => {
            require(motion, "motion file")?;
            match tau {
                Some(t) if !(*t > 0.0 && t.is_finite()) => Err(Error::validation("--tau must be positive")),
                _ => Ok(()),
            }
        }
        Cmd::Report { inputs, .. } => inputs.iter().try_for_each(|p| require(p, "report")),
        Cmd::Datagen { .. } | Cmd::Decompose { .. } | Cmd::Rerun { .. } => Ok(()),
    }
}

fn system_path(spec: &str, models: Option<&Path>) -> Result<(String, PathBuf)> {
    match spec.split_once('=') {
        Some((name, path)) if !name.is_empty() && !path.is_empty() => Ok((name.to_string(), PathBuf::from(path))),
        Some(_) => Err(Error::validation(format!("--system `{spec}` is not NAME=PATH"))),
        None => match models {
            Some(dir) => Ok((spec.to_string(), dir.join(format!("{spec}.ckpt")))),
            None => Err(Error::validation(format!("--system {spec} needs --models or NAME=PATH"))),
        },
    }
}

fn decompose(text: &str, rules_only: bool) -> Result<DecomposedPrompt> {
    if rules_only {
        decompose_rules(text)
    } else {
        decompose_llm(text, LlmConfig::from_env().as_ref(), &HttpTransport)
    }
}

/// Executes a prepared command under a validated config.
pub fn execute(cmd: &Cmd, cfg: &ExperimentConfig) -> Result<()> {
    let fingerprint = cfg.fingerprint()?;
    if let Some((out, is_dir)) = cmd.output() {
        Snapshot {
            fingerprint: fingerprint.clone(),
            invocation: cmd.clone(),
            config: cfg.clone(),
        }
        .write(&Snapshot::path_for(out, is_dir))?;
    }
    match cmd {
        Cmd::Datagen { out, .. } => {
            let records = generate_dataset(cfg.data.count, &cfg.data.generator, &cfg.skeleton(), cfg.seed)?;
            let manifest = write_dataset(out, &records, &cfg.data.generator, cfg.seed)?;
            metric(json!({ "command": "datagen", "records": manifest.count }));
            Ok(())
        }
        Cmd::TrainAligner { data, out } => guarded(out, || {
            let records = read_dataset(data)?;
            let (model, report) = train_aligner(&records, &cfg.align, cfg.catalog()?, Some(out), |epoch, loss| {
                metric(json!({ "command": "train-aligner", "epoch": epoch, "loss": loss }));
            })?;
            model.save(out)?;
            log::info!(
                "aligner loss {:.4} -> {:.4} ({:.0}% reduction)",
                report.initial_loss,
                report.final_loss,
                100.0 * report.reduction()
            );
            Ok(())
        }),
        Cmd::TrainEvaluator { data, out } => guarded(out, || {
            let records = read_dataset(data)?;
            let (model, report) = train_evaluator(&records, &cfg.evaluator, |epoch, loss, stats| {
                metric(json!({
                    "command": "train-evaluator",
                    "epoch": epoch,
                    "loss": loss,
                    "margin": stats.margin,
                    "match_rate": stats.match_rate,
                }));
            })?;
            model.save(out)?;
            log::info!("evaluator validation margin {:.3}", report.validation.margin);
            Ok(())
        }),
        Cmd::Train { data, aligner, out } => guarded(out, || {
            let records = read_dataset(data)?;
            let aligner = AlignerModel::load(aligner)?;
            let (model, _) = train_diffusion(&records, &aligner, &cfg.diffusion, Some(out), |epoch, rec, align| {
                metric(json!({ "command": "train", "epoch": epoch, "reconstruction": rec, "align": align }));
            })?;
            model.save(out)
        }),
        Cmd::Sample { gen } => guarded(&gen.out, || {
            let (model, prompt) = load_generation(gen)?;
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            let motion = sample(&model, &prompt, gen.frames, cfg.sampler.guidance, &mut rng)?;
            let sim = model.aligner.similarity(&prompt, &motion)?;
            write_generated_motion(&motion, &prompt.full_text, cfg.seed, &gen.out)?;
            metric(json!({ "command": "sample", "similarity": sim.mean }));
            Ok(())
        }),
        Cmd::Refine { gen, diagnostics, .. } => guarded(&gen.out, || {
            let (model, prompt) = load_generation(gen)?;
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            let result = refine(&model, &prompt, gen.frames, &cfg.sampler, &mut rng)?;
            for r in &result.rounds {
                metric(json!({
                    "command": "refine",
                    "round": r.round,
                    "t_start": r.t_start,
                    "mean_guide_norm": r.mean_guide_norm,
                    "mean_similarity": r.mean_similarity,
                }));
            }
            if let Some(path) = diagnostics {
                write_diagnostics(path, &result.rounds)?;
            }
            write_generated_motion(&result.motion, &prompt.full_text, cfg.seed, &gen.out)
        }),
        Cmd::Eval {
            systems,
            refined,
            models,
            evaluator,
            test,
            out,
            ..
        } => guarded(out, || {
            let evaluator = EvaluatorModel::load(evaluator)?;
            let test = TestSet::new(read_dataset(test)?, &evaluator)?;
            let mut reports = Vec::with_capacity(systems.len() + 1);
            let mut first_aligner = None;
            for spec in systems {
                let (name, path) = system_path(spec, models.as_deref())?;
                let model = DiffusionModel::load(&path)?;
                let eval_cfg = cfg.eval_config(refined.contains(&name));
                log::info!("evaluating {name} on {} prompts", test.len());
                let e = evaluate_model(&name, &model, &evaluator, &test, &eval_cfg, &fingerprint)?;
                emit_report(&e.report);
                reports.push(e.report);
                first_aligner.get_or_insert(model.aligner);
            }
            let real = evaluate_real(&evaluator, &test, first_aligner.as_ref(), &cfg.eval_config(false), &fingerprint)?;
            emit_report(&real.report);
            reports.insert(0, real.report);
            write_reports_toml(&out.with_extension("toml"), &reports)?;
            write_reports_csv(out, &reports)
        }),
        Cmd::ExtractKp { motion, tau, out } => guarded(out, || {
            let (motion, _) = read_motion_sequence(motion)?;
            let catalog = cfg.catalog()?;
            let kp = match tau {
                Some(t) => extract_smooth(&motion, &catalog, *t)?,
                None => extract_hard(&motion, &catalog)?,
            };
            kp.write_csv(&catalog, out)
        }),
        Cmd::Decompose { text, rules, out } => {
            let prompt = decompose(text, *rules)?;
            let body = serde_json::to_string_pretty(&prompt)
                .map_err(|e| Error::validation(format!("prompt encoding: {e}")))?;
            match out {
                Some(path) => guarded(path, || std::fs::write(path, &body).map_err(|e| Error::io(path, e))),
                None => {
                    println!("{body}");
                    Ok(())
                }
            }
        }
        Cmd::Report { inputs, out } => {
            let mut rows = Vec::new();
            for p in inputs {
                rows.extend(read_reports(p)?);
            }
            let comparison = compare(&rows);
            for w in &comparison.warnings {
                log::warn!("{w}");
            }
            let table = render_table(&comparison);
            let table_path = out.join("table.md");
            guarded(&table_path, || {
                std::fs::write(&table_path, &table).map_err(|e| Error::io(&table_path, e))?;
                write_series(out, &rows).map(drop)
            })?;
            print!("{table}");
            Ok(())
        }
        Cmd::Rerun { .. } => Err(Error::validation("rerun cannot be nested")),
    }
}

fn load_generation(gen: &Generation) -> Result<(DiffusionModel, DecomposedPrompt)> {
    let model = DiffusionModel::load(&gen.model)?;
    let prompt = DecomposedPrompt::new(gen.prompt.clone(), gen.parts.clone(), Source::Llm)?;
    Ok((model, prompt))
}

fn emit_report(r: &MetricReport) {
    metric(json!({ "command": "eval", "report": r }));
}

/// Loads a snapshot, optionally redirects its output, and replays it.
pub fn rerun(snapshot: &Path, out: Option<&Path>) -> Result<()> {
    require(snapshot, "snapshot")?;
    let snap = Snapshot::read(snapshot)?;
    let mut cmd = snap.invocation;
    if let Some(o) = out {
        cmd.set_output(o.to_path_buf());
    }
    if snap.fingerprint != snap.config.fingerprint()? {
        log::warn!("snapshot fingerprint does not match its configuration");
    }
    prepare(&mut cmd)?;
    execute(&cmd, &snap.config)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn system_specs() {
        let (n, p) = system_path("keta-dec", Some(Path::new("models"))).unwrap();
        assert_eq!((n.as_str(), p), ("keta-dec", PathBuf::from("models/keta-dec.ckpt")));
        let (n, p) = system_path("mdm=/tmp/m.ckpt", None).unwrap();
        assert_eq!((n.as_str(), p), ("mdm", PathBuf::from("/tmp/m.ckpt")));
        assert!(system_path("mdm", None).unwrap_err().is_validation());
        assert!(system_path("=x", None).unwrap_err().is_validation());
    }

    #[test]
    fn marker_is_removed_only_on_success() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("o.bin");
        guarded(&out, || Ok(())).unwrap();
        assert!(!marker_for(&out).exists());
        let _ = guarded(&out, || -> Result<()> { Err(Error::validation("boom")) });
        assert!(marker_for(&out).exists());
    }

    #[test]
    fn flags_override_config() {
        let mut cfg = ExperimentConfig::default();
        let cmd = Cmd::Datagen {
            count: Some(12),
            seed: Some(9),
            out: "d".into(),
        };
        apply_flags(&cmd, &mut cfg);
        assert_eq!((cfg.data.count, cfg.seed), (12, 9));
    }
}
