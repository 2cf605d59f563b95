//! Toy-scale generation metrics: a contrastive evaluator, Fréchet distance
//! on its features, diversity, retrieval precision and report tables.

mod evaluator;
mod metrics;
mod report;

use std::path::Path;

use diffnet::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::alignment::AlignerModel;
use crate::diffusion::{refine, sample, DiffusionModel, SamplerConfig};
use crate::error::{read_file, write_file, Error, Result};
use crate::motion::{DatasetRecord, MotionSequence};
use crate::text::{decompose_rules, script_to_ground_truth, DecomposedPrompt};

pub use evaluator::{
    train_evaluator, validation_stats, EvaluatorConfig, EvaluatorModel, EvaluatorReport, ValidationStats,
};
pub use metrics::{
    bootstrap_confidence, diversity, fid, r_precision, retrieval_ranks, select_rows, top_k, EIGEN_CLAMP,
    R_PRECISION_BATCH,
};
pub use report::{compare, render_table, write_series, Comparison, Mark, Metric, Orientation, METRICS};

/// Name of the control row computed from held-out real motions.
pub const REAL_SYSTEM: &str = "real";

/// One row of a comparison table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub system: String,
    pub top1: f64,
    pub top2: f64,
    pub top3: f64,
    pub fid: f64,
    pub diversity: f64,
    /// Mean text-to-motion similarity `d̂`, when an aligner was available.
    pub mean_similarity: Option<f64>,
    pub count: usize,
    pub fingerprint: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub guidance: f64,
    /// Guided refinement instead of plain sampling.
    pub refine: Option<SamplerConfig>,
    pub diversity_pairs: usize,
    pub batch: usize,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            guidance: 1.5,
            refine: None,
            diversity_pairs: 300,
            batch: R_PRECISION_BATCH,
            seed: 0,
        }
    }
}

/// The prompt a test record is generated from: the rule-based split of its
/// full text, or its ground-truth parts if the rules find nothing.
pub fn test_prompt(record: &DatasetRecord) -> DecomposedPrompt {
    decompose_rules(&record.full_text).unwrap_or_else(|_| {
        let mut p = script_to_ground_truth(&record.script);
        p.full_text = record.full_text.clone();
        p
    })
}

/// Held-out records with their evaluator features, computed once and shared
/// by every system under comparison.
#[derive(Clone, Debug)]
pub struct TestSet {
    pub records: Vec<DatasetRecord>,
    pub prompts: Vec<DecomposedPrompt>,
    pub motion_features: Tensor,
    pub text_features: Tensor,
}

impl TestSet {
    pub fn new(records: Vec<DatasetRecord>, evaluator: &EvaluatorModel) -> Result<Self> {
        if records.is_empty() {
            return Err(Error::validation("test set is empty"));
        }
        let prompts = records.iter().map(test_prompt).collect();
        let motions: Vec<&MotionSequence> = records.iter().map(|r| &r.motion).collect();
        let texts: Vec<&str> = records.iter().map(|r| r.full_text.as_str()).collect();
        Ok(Self {
            motion_features: evaluator.motion_features(&motions)?,
            text_features: evaluator.text_features(&texts)?,
            records,
            prompts,
        })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

/// Everything computed for one system, kept for paired comparisons.
#[derive(Clone, Debug)]
pub struct SystemEvaluation {
    pub report: MetricReport,
    pub motions: Vec<MotionSequence>,
    pub motion_features: Tensor,
    /// Retrieval rank of each motion in complete batches.
    pub ranks: Vec<usize>,
    pub similarities: Vec<f64>,
}

/// One motion per test prompt at the record's length. Prompt `i` draws from
/// its own stream of `seed`, so outputs do not depend on evaluation order.
pub fn generate(model: &DiffusionModel, test: &TestSet, config: &EvalConfig) -> Result<Vec<MotionSequence>> {
    let mut out = Vec::with_capacity(test.len());
    for (i, (record, prompt)) in test.records.iter().zip(&test.prompts).enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(i as u64);
        let t_len = record.motion.n_frames();
        let motion = match &config.refine {
            Some(rc) => refine(model, prompt, t_len, rc, &mut rng)?.motion,
            None => sample(model, prompt, t_len, config.guidance, &mut rng)?,
        };
        out.push(motion);
    }
    Ok(out)
}

fn score(
    system: &str,
    motions: Vec<MotionSequence>,
    reference: &Tensor,
    test: &TestSet,
    evaluator: &EvaluatorModel,
    aligner: Option<&AlignerModel>,
    config: &EvalConfig,
    fingerprint: &str,
) -> Result<SystemEvaluation> {
    let refs: Vec<&MotionSequence> = motions.iter().collect();
    let features = evaluator.motion_features(&refs)?;
    let ranks = retrieval_ranks(&features, &test.text_features, config.batch)?;
    let [top1, top2, top3] = top_k(&ranks);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(u64::MAX);
    let div = diversity(&features, config.diversity_pairs, &mut rng)?;
    let similarities = match aligner {
        Some(a) => motions
            .iter()
            .zip(&test.prompts)
            .map(|(m, p)| Ok(a.similarity(p, m)?.mean))
            .collect::<Result<Vec<_>>>()?,
        None => Vec::new(),
    };
    let mean_similarity = (!similarities.is_empty()).then(|| similarities.iter().sum::<f64>() / similarities.len() as f64);
    Ok(SystemEvaluation {
        report: MetricReport {
            system: system.to_string(),
            top1,
            top2,
            top3,
            fid: fid(reference, &features)?,
            diversity: div,
            mean_similarity,
            count: motions.len(),
            fingerprint: fingerprint.to_string(),
        },
        motions,
        motion_features: features,
        ranks,
        similarities,
    })
}

/// Generates from `model` for every test prompt and scores the result
/// against the real test motions.
pub fn evaluate_model(
    system: &str,
    model: &DiffusionModel,
    evaluator: &EvaluatorModel,
    test: &TestSet,
    config: &EvalConfig,
    fingerprint: &str,
) -> Result<SystemEvaluation> {
    let motions = generate(model, test, config)?;
    score(
        system,
        motions,
        &test.motion_features,
        test,
        evaluator,
        Some(&model.aligner),
        config,
        fingerprint,
    )
}

/// The real-data control row. Its Fréchet distance compares the two halves
/// of the test set, so it measures the metric's own noise floor.
pub fn evaluate_real(
    evaluator: &EvaluatorModel,
    test: &TestSet,
    aligner: Option<&AlignerModel>,
    config: &EvalConfig,
    fingerprint: &str,
) -> Result<SystemEvaluation> {
    let n = test.len();
    let first: Vec<usize> = (0..n / 2).collect();
    let second: Vec<usize> = (n / 2..n).collect();
    let half_fid = fid(
        &select_rows(&test.motion_features, &first),
        &select_rows(&test.motion_features, &second),
    )?;
    let motions = test.records.iter().map(|r| r.motion.clone()).collect();
    let mut e = score(
        REAL_SYSTEM,
        motions,
        &test.motion_features,
        test,
        evaluator,
        aligner,
        config,
        fingerprint,
    )?;
    e.report.fid = half_fid;
    Ok(e)
}

#[derive(Serialize, Deserialize)]
struct ReportFile {
    system: Vec<MetricReport>,
}

/// CSV with one row per system.
pub fn write_reports_csv(path: &Path, reports: &[MetricReport]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in reports {
        w.serialize(r)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::validation(format!("csv flush: {e}")))?;
    write_file(path, &bytes)
}

/// Structured-text form: a TOML array of `[[system]]` tables.
pub fn write_reports_toml(path: &Path, reports: &[MetricReport]) -> Result<()> {
    let text = toml::to_string(&ReportFile {
        system: reports.to_vec(),
    })
    .map_err(|e| Error::validation(format!("report serialization: {e}")))?;
    write_file(path, text.as_bytes())
}

/// Reads either format, chosen by the `.csv` extension.
pub fn read_reports(path: &Path) -> Result<Vec<MetricReport>> {
    let bytes = read_file(path)?;
    if path.extension().is_some_and(|e| e == "csv") {
        let mut r = csv::Reader::from_reader(bytes.as_slice());
        Ok(r.deserialize().collect::<std::result::Result<Vec<MetricReport>, _>>()?)
    } else {
        let text = String::from_utf8(bytes).map_err(|e| Error::parse(e.utf8_error().valid_up_to(), "report is not UTF-8"))?;
        let file: ReportFile =
            toml::from_str(&text).map_err(|e| Error::parse(e.span().map_or(0, |s| s.start), e.message().to_string()))?;
        Ok(file.system)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn report(system: &str, fid: f64) -> MetricReport {
        MetricReport {
            system: system.into(),
            top1: 0.25,
            top2: 0.5,
            top3: 0.75,
            fid,
            diversity: 1.5,
            mean_similarity: if system == REAL_SYSTEM { None } else { Some(0.3) },
            count: 64,
            fingerprint: "abc".into(),
        }
    }

    #[test]
    fn report_files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let rows = vec![report(REAL_SYSTEM, 0.01), report("keta-dec", 0.5)];
        let csv_path = dir.path().join("r.csv");
        let toml_path = dir.path().join("r.toml");
        write_reports_csv(&csv_path, &rows).unwrap();
        write_reports_toml(&toml_path, &rows).unwrap();
        assert_eq!(read_reports(&csv_path).unwrap(), rows);
        assert_eq!(read_reports(&toml_path).unwrap(), rows);
        let header = std::fs::read_to_string(&csv_path).unwrap();
        assert_eq!(
            header.lines().next().unwrap(),
            "system,top1,top2,top3,fid,diversity,mean_similarity,count,fingerprint"
        );
    }
}
