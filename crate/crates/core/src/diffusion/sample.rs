use std::path::Path;

use diffnet::Tensor;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::alignment::{similarity_from, AlignMode};
use crate::diffusion::{cfg_combine, p_step, q_sample, standard_normal, Backbone, Condition, DiffusionModel, GuideToken};
use crate::error::{write_file, Error, Result};
use crate::motion::MotionSequence;
use crate::text::DecomposedPrompt;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerConfig {
    /// Classifier-free guidance strength `w`.
    pub guidance: f64,
    /// Denoise/re-diffuse rounds `R`.
    pub rounds: usize,
    /// Re-diffusion depth of each round as a fraction of the horizon; the
    /// first entry belongs to the initial full denoise.
    pub fractions: Vec<f64>,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            guidance: 1.5,
            rounds: 3,
            fractions: vec![1.0, 0.5, 0.25],
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rounds == 0 {
            return Err(Error::validation("refinement needs at least one round"));
        }
        if self.fractions.len() < self.rounds {
            return Err(Error::validation(format!(
                "{} rounds need {} fractions, got {}",
                self.rounds,
                self.rounds,
                self.fractions.len()
            )));
        }
        if self.fractions.iter().any(|&f| !(f > 0.0 && f <= 1.0)) {
            return Err(Error::validation("fractions must lie in (0, 1]"));
        }
        if !self.guidance.is_finite() {
            return Err(Error::validation("guidance strength must be finite"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundDiagnostics {
    pub round: usize,
    /// Step the round started denoising from.
    pub t_start: usize,
    pub mean_guide_norm: f64,
    pub mean_similarity: f64,
}

#[derive(Clone, Debug)]
pub struct RefineOutput {
    pub motion: MotionSequence,
    pub rounds: Vec<RoundDiagnostics>,
}

/// Runs the reverse chain from `x` at step `t_start` down to 0.
fn denoise<R: Rng + ?Sized>(
    model: &DiffusionModel,
    mut x: Tensor,
    t_start: usize,
    text: &Tensor,
    guide: Option<&GuideToken>,
    w: f64,
    rng: &mut R,
) -> Result<Tensor> {
    let cond = Condition { text, guide };
    for t in (1..=t_start).rev() {
        let c = model.denoiser.predict(&x, t, Some(&cond))?;
        let x0 = if w == 0.0 {
            c
        } else {
            let u = model.denoiser.predict(&x, t, None)?;
            cfg_combine(&c, &u, w)?
        };
        x = p_step(&x, &x0, t, &model.schedule, rng)?;
    }
    Ok(x)
}

fn start_noise<R: Rng + ?Sized>(model: &DiffusionModel, t_len: usize, rng: &mut R) -> Result<Tensor> {
    if t_len < 2 {
        return Err(Error::validation(format!("cannot sample {t_len} frames")));
    }
    Ok(standard_normal(&[t_len, model.denoiser.config.n_features], rng))
}

fn sample_tensor<R: Rng + ?Sized>(
    model: &DiffusionModel,
    text: &Tensor,
    t_len: usize,
    w: f64,
    rng: &mut R,
) -> Result<Tensor> {
    let x = start_noise(model, t_len, rng)?;
    denoise(model, x, model.schedule.t_steps(), text, None, w, rng)
}

/// Full reverse chain from pure noise; guide tokens, if any, stay masked.
pub fn sample<R: Rng + ?Sized>(
    model: &DiffusionModel,
    prompt: &DecomposedPrompt,
    t_len: usize,
    w: f64,
    rng: &mut R,
) -> Result<MotionSequence> {
    let text = model.text_condition(prompt)?;
    model.to_motion(&sample_tensor(model, &text, t_len, w, rng)?)
}

/// Guided refinement: a masked first pass, then rounds that re-diffuse the
/// previous output to `⌈fraction · T⌉` and denoise it with active guides.
pub fn refine<R: Rng + ?Sized>(
    model: &DiffusionModel,
    prompt: &DecomposedPrompt,
    t_len: usize,
    config: &SamplerConfig,
    rng: &mut R,
) -> Result<RefineOutput> {
    config.validate()?;
    if model.denoiser.backbone() != Backbone::Decoder {
        return Err(Error::validation("refinement needs the decoder backbone"));
    }
    if model.aligner.config.mode != AlignMode::FineGrained {
        return Err(Error::validation("refinement needs a fine-grained aligner"));
    }
    let text = model.text_condition(prompt)?;
    let targets = model.aligner.targets(prompt, t_len)?;
    let t_steps = model.schedule.t_steps();
    let mut x = sample_tensor(model, &text, t_len, config.guidance, rng)?;
    let mut rounds = Vec::with_capacity(config.rounds);
    for round in 1..=config.rounds {
        let t_start = if round == 1 {
            t_steps
        } else {
            let t_k = ((config.fractions[round - 1] * t_steps as f64).ceil() as usize).clamp(1, t_steps);
            let guide = model.guide_for(&targets, &x)?;
            let noise = standard_normal(x.shape(), rng);
            let x_t = q_sample(&x, t_k, &noise, &model.schedule)?;
            x = denoise(model, x_t, t_k, &text, Some(&guide), config.guidance, rng)?;
            t_k
        };
        let kp = model.smooth_kp(&x)?;
        let guide = model.guide_for(&targets, &x)?;
        rounds.push(RoundDiagnostics {
            round,
            t_start,
            mean_guide_norm: guide.mean_norm(),
            mean_similarity: similarity_from(&targets, &kp).mean,
        });
    }
    Ok(RefineOutput {
        motion: model.to_motion(&x)?,
        rounds,
    })
}

/// CSV with one row per round.
pub fn write_diagnostics(path: &Path, rounds: &[RoundDiagnostics]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rounds {
        w.serialize(r)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::validation(format!("csv flush: {e}")))?;
    write_file(path, &bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::{train_diffusion, DiffusionTrainConfig};
    use crate::motion::{generate_dataset, GeneratorConfig, Skeleton};
    use crate::text::script_to_ground_truth;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn trained(backbone: Backbone) -> (DiffusionModel, DecomposedPrompt, usize) {
        let cfg = GeneratorConfig {
            max_commands: 2,
            min_duration: 5,
            max_duration: 8,
            ..Default::default()
        };
        let recs = generate_dataset(4, &cfg, &Skeleton::standard(), 2).unwrap();
        let al = crate::diffusion::train::tests::tiny_aligner();
        let tc = DiffusionTrainConfig {
            backbone,
            t_steps: 8,
            width: 8,
            depth: 1,
            heads: 2,
            epochs: 1,
            ..Default::default()
        };
        let (m, _) = train_diffusion(&recs, &al, &tc, None, |_, _, _| {}).unwrap();
        let p = script_to_ground_truth(&recs[0].script);
        (m, p, recs[0].motion.n_frames())
    }

    #[test]
    fn sample_shape_seed_and_refine_equivalence() {
        let (m, p, t) = trained(Backbone::Decoder);
        let a = sample(&m, &p, t, 1.5, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!((a.n_frames(), a.n_joints()), (t, 5));
        assert!(a.positions().iter().all(|v| v.is_finite()));
        let b = sample(&m, &p, t, 1.5, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        assert_ne!(a.positions(), b.positions());
        let one = SamplerConfig {
            rounds: 1,
            ..Default::default()
        };
        let r = refine(&m, &p, t, &one, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(r.motion, a);
        assert_eq!(r.rounds.len(), 1);
        let r3 = refine(&m, &p, t, &SamplerConfig::default(), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(r3.rounds.len(), 3);
        assert_eq!(r3.rounds.iter().map(|r| r.t_start).collect::<Vec<_>>(), vec![8, 4, 2]);
    }

    #[test]
    fn encoder_cannot_refine() {
        let (m, p, t) = trained(Backbone::Encoder);
        let err = refine(&m, &p, t, &SamplerConfig::default(), &mut ChaCha8Rng::seed_from_u64(1)).unwrap_err();
        assert!(err.is_validation());
        assert!(sample(&m, &p, t, 0.0, &mut ChaCha8Rng::seed_from_u64(1)).is_ok());
    }

    #[test]
    fn diagnostics_csv_has_one_row_per_round() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("diag.csv");
        let rows = vec![
            RoundDiagnostics { round: 1, t_start: 10, mean_guide_norm: 0.5, mean_similarity: 0.1 },
            RoundDiagnostics { round: 2, t_start: 5, mean_guide_norm: 0.4, mean_similarity: 0.2 },
        ];
        write_diagnostics(&path, &rows).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().next().unwrap(), "round,t_start,mean_guide_norm,mean_similarity");
        assert_eq!(text.lines().count(), 3);
    }
}
