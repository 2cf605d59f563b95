use std::path::Path;

use diffnet::{Adam, AdamConfig, Checkpoint, GradBuffer, Graph, Tensor, Var};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::alignment::{guide_from, AlignTargets, AlignerModel};
use crate::diffusion::{
    q_sample, standard_normal, Backbone, Condition, Denoiser, DenoiserConfig, DiffusionSchedule, GuideToken,
    ScheduleKind,
};
use crate::error::{read_file, write_file, Error, Result};
use crate::kp::{smooth_graph, KpSequence, KpMode};
use crate::motion::{DatasetRecord, MotionSequence, Skeleton};
use crate::text::{script_to_ground_truth, DecomposedPrompt};

pub const CHECKPOINT_FORMAT: &str = "kineta-diffusion/1";
const STD_FLOOR: f64 = 1e-2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiffusionTrainConfig {
    pub backbone: Backbone,
    pub t_steps: usize,
    pub schedule: ScheduleKind,
    pub width: usize,
    pub depth: usize,
    pub heads: usize,
    pub ff_mult: usize,
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub grad_clip: f64,
    pub p_uncond: f64,
    /// Probability of masking every guide token of a training sample.
    pub p_mask: f64,
    pub lambda_kp: f64,
    /// Decoder only: feed guide tokens during training at all.
    pub use_guide: bool,
    pub seed: u64,
}

impl Default for DiffusionTrainConfig {
    fn default() -> Self {
        Self {
            backbone: Backbone::Decoder,
            t_steps: 100,
            schedule: ScheduleKind::Linear,
            width: 64,
            depth: 4,
            heads: 4,
            ff_mult: 2,
            epochs: 200,
            batch: 32,
            lr: 5e-4,
            grad_clip: 1.0,
            p_uncond: 0.1,
            p_mask: 0.5,
            lambda_kp: 1e-4,
            use_guide: true,
            seed: 0,
        }
    }
}

impl DiffusionTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.t_steps == 0 || self.batch == 0 {
            return Err(Error::validation("t_steps and batch must be positive"));
        }
        for (name, p) in [("p_uncond", self.p_uncond), ("p_mask", self.p_mask)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::validation(format!("{name} must lie in [0, 1], got {p}")));
            }
        }
        if !(self.lambda_kp >= 0.0 && self.lambda_kp.is_finite()) {
            return Err(Error::validation(format!("lambda_kp must be >= 0, got {}", self.lambda_kp)));
        }
        if !(self.lr > 0.0) || !(self.grad_clip > 0.0) {
            return Err(Error::validation("lr and grad_clip must be positive"));
        }
        Ok(())
    }

    fn denoiser(&self, n_features: usize, d_text: usize, n_kp: usize) -> DenoiserConfig {
        DenoiserConfig {
            backbone: self.backbone,
            n_features,
            d_text,
            n_kp,
            width: self.width,
            depth: self.depth,
            heads: self.heads,
            ff_mult: self.ff_mult,
            seed: self.seed,
        }
    }
}

/// Per-channel affine normalization of flattened joint positions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalizer {
    pub fn fit(records: &[DatasetRecord]) -> Result<Self> {
        let first = records.first().ok_or_else(|| Error::validation("cannot normalize an empty dataset"))?;
        let c = first.motion.n_joints() * 3;
        let (mut sum, mut sq, mut n) = (vec![0.0; c], vec![0.0; c], 0usize);
        for r in records {
            if r.motion.n_joints() * 3 != c {
                return Err(Error::validation("records use different skeletons"));
            }
            for frame in r.motion.positions().chunks_exact(c) {
                for (k, &v) in frame.iter().enumerate() {
                    sum[k] += v;
                    sq[k] += v * v;
                }
                n += 1;
            }
        }
        let nf = n as f64;
        let mean: Vec<f64> = sum.iter().map(|s| (s / nf) as f32 as f64).collect();
        let std = sq
            .iter()
            .zip(&sum)
            .map(|(q, s)| {
                let var = (q / nf - (s / nf).powi(2)).max(0.0);
                (var.sqrt().max(STD_FLOOR)) as f32 as f64
            })
            .collect();
        Ok(Self { mean, std })
    }

    pub fn normalize(&self, motion: &MotionSequence) -> Tensor {
        let c = self.mean.len();
        let t = motion.to_tensor();
        let data = t
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| (v - self.mean[i % c]) / self.std[i % c])
            .collect();
        Tensor::new(t.shape(), data).expect("same shape")
    }

    pub fn denormalize(&self, x: &Tensor) -> Tensor {
        let c = self.mean.len();
        let data = x
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v * self.std[i % c] + self.mean[i % c])
            .collect();
        Tensor::new(x.shape(), data).expect("same shape")
    }

    pub fn denormalize_graph(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let std = g.constant(Tensor::row(self.std.clone()));
        let mean = g.constant(Tensor::row(self.mean.clone()));
        let y = g.mul(x, std)?;
        Ok(g.add(y, mean)?)
    }
}

/// Everything the denoiser needs from one record, computed once.
#[derive(Clone, Debug)]
pub struct TrainingSet {
    pub x0: Vec<Tensor>,
    pub text: Vec<Tensor>,
    pub targets: Vec<AlignTargets>,
}

impl TrainingSet {
    pub fn new(records: &[DatasetRecord], aligner: &AlignerModel, normalizer: &Normalizer) -> Result<Self> {
        let mut set = Self {
            x0: Vec::with_capacity(records.len()),
            text: Vec::with_capacity(records.len()),
            targets: Vec::with_capacity(records.len()),
        };
        for r in records {
            let mut prompt = script_to_ground_truth(&r.script);
            prompt.full_text = r.full_text.clone();
            set.x0.push(normalizer.normalize(&r.motion));
            set.text.push(embed_parts(aligner, &prompt)?);
            set.targets.push(aligner.targets(&prompt, r.motion.n_frames())?);
        }
        Ok(set)
    }

    pub fn len(&self) -> usize {
        self.x0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x0.is_empty()
    }
}

/// `[P, d_text]` condition: the aligner's embedding of each decomposed part.
pub(crate) fn embed_parts(aligner: &AlignerModel, prompt: &DecomposedPrompt) -> Result<Tensor> {
    let mut g = Graph::new();
    let v = aligner.embedder.forward(&mut g, &aligner.store, &prompt.parts)?;
    Ok(g.value(v).clone())
}

/// Metadata stored with every diffusion checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointInfo {
    pub format: String,
    pub config: DiffusionTrainConfig,
    pub denoiser: DenoiserConfig,
    pub skeleton: Skeleton,
    pub fps: f64,
    pub normalizer: Normalizer,
    pub aligner_checksum: String,
}

/// A trained denoiser bundled with everything sampling needs.
#[derive(Clone, Debug)]
pub struct DiffusionModel {
    pub config: DiffusionTrainConfig,
    pub denoiser: Denoiser,
    pub schedule: DiffusionSchedule,
    pub normalizer: Normalizer,
    pub aligner: AlignerModel,
    pub skeleton: Skeleton,
    pub fps: f64,
}

impl DiffusionModel {
    pub fn new(
        config: DiffusionTrainConfig,
        aligner: AlignerModel,
        normalizer: Normalizer,
        skeleton: Skeleton,
        fps: f64,
    ) -> Result<Self> {
        config.validate()?;
        if aligner.catalog.n_joints != skeleton.n_joints() {
            return Err(Error::validation(format!(
                "aligner catalog covers {} joints, skeleton has {}",
                aligner.catalog.n_joints,
                skeleton.n_joints()
            )));
        }
        let n_features = skeleton.n_joints() * 3;
        if normalizer.mean.len() != n_features {
            return Err(Error::validation("normalizer does not match the skeleton"));
        }
        let denoiser = Denoiser::new(config.denoiser(n_features, aligner.config.d_text, aligner.n_kp()))?;
        let schedule = DiffusionSchedule::new(config.t_steps, config.schedule)?;
        let mut aligner = aligner;
        aligner.store.set_frozen(true);
        Ok(Self {
            config,
            denoiser,
            schedule,
            normalizer,
            aligner,
            skeleton,
            fps,
        })
    }

    pub fn text_condition(&self, prompt: &DecomposedPrompt) -> Result<Tensor> {
        embed_parts(&self.aligner, prompt)
    }

    /// Denormalized motion from a model-space tensor.
    pub fn to_motion(&self, x: &Tensor) -> Result<MotionSequence> {
        MotionSequence::from_tensor(self.skeleton.clone(), self.fps, &self.normalizer.denormalize(x))
    }

    /// Smooth phrases of a model-space tensor, as the aligner sees them.
    pub(crate) fn smooth_kp(&self, x: &Tensor) -> Result<KpSequence> {
        let mut g = Graph::new();
        let v = g.constant(x.clone());
        let pos = self.normalizer.denormalize_graph(&mut g, v)?;
        let kp = smooth_graph(&mut g, pos, &self.aligner.catalog, self.fps, self.aligner.config.tau)?;
        Ok(KpSequence {
            values: g.value(kp).clone(),
            mode: KpMode::Smooth {
                tau: self.aligner.config.tau,
            },
        })
    }

    /// `proj(T_i) − Ω_i(x)` for every part, all active.
    pub(crate) fn guide_for(&self, targets: &AlignTargets, x: &Tensor) -> Result<GuideToken> {
        let kp = self.smooth_kp(x)?;
        GuideToken::active(guide_from(targets, &kp)?)
    }

    /// Weighted alignment term `‖W · kp(x̂0) − proj‖²` on the graph.
    pub(crate) fn align_term(&self, g: &mut Graph, x0_hat: Var, targets: &AlignTargets) -> Result<Var> {
        let pos = self.normalizer.denormalize_graph(g, x0_hat)?;
        let kp = smooth_graph(g, pos, &self.aligner.catalog, self.fps, self.aligner.config.tau)?;
        let w = g.constant(targets.weights.clone());
        let om = g.matmul(w, kp)?;
        let proj = g.constant(targets.projected.clone());
        let r = g.sub(om, proj)?;
        Ok(g.sum_squares(r))
    }

    pub fn info(&self) -> Result<CheckpointInfo> {
        Ok(CheckpointInfo {
            format: CHECKPOINT_FORMAT.into(),
            config: self.config.clone(),
            denoiser: self.denoiser.config.clone(),
            skeleton: self.skeleton.clone(),
            fps: self.fps,
            normalizer: self.normalizer.clone(),
            aligner_checksum: self.aligner.checksum()?,
        })
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let aligner = self.aligner.to_checkpoint()?;
        let meta = MetaFile {
            info: self.info()?,
            aligner_metadata: aligner.metadata,
        };
        let text = toml::to_string(&meta).map_err(|e| Error::validation(format!("checkpoint metadata: {e}")))?;
        let mut ck = Checkpoint::new(text);
        ck.push_store("denoiser/", &self.denoiser.store);
        for (name, t) in aligner.entries {
            ck.entries.push((format!("aligner/{name}"), t));
        }
        Ok(ck)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let meta: MetaFile = toml::from_str(&ck.metadata)
            .map_err(|e| Error::parse(0, format!("diffusion checkpoint metadata: {}", e.message())))?;
        let info = meta.info;
        if info.format != CHECKPOINT_FORMAT {
            return Err(Error::validation(format!("not a diffusion checkpoint: `{}`", info.format)));
        }
        let mut aligner_ck = Checkpoint::new(meta.aligner_metadata);
        aligner_ck.entries = ck
            .entries
            .iter()
            .filter_map(|(n, t)| n.strip_prefix("aligner/").map(|s| (s.to_string(), t.clone())))
            .collect();
        let aligner = AlignerModel::from_checkpoint(&aligner_ck)?;
        if aligner.checksum()? != info.aligner_checksum {
            return Err(Error::validation("embedded aligner does not match its recorded checksum"));
        }
        let mut model = Self::new(info.config, aligner, info.normalizer, info.skeleton, info.fps)?;
        if model.denoiser.config != info.denoiser {
            return Err(Error::validation("denoiser configuration disagrees with the training configuration"));
        }
        ck.load_store("denoiser/", &mut model.denoiser.store)?;
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_file(path, &self.to_checkpoint()?.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::from_bytes(&read_file(path)?)?)
    }
}

#[derive(Serialize, Deserialize)]
struct MetaFile {
    info: CheckpointInfo,
    aligner_metadata: String,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainReport {
    /// Per epoch: mean reconstruction term and mean alignment term.
    pub epochs: Vec<(f64, f64)>,
    pub steps: usize,
}

/// Trains a denoiser against a frozen aligner.
pub fn train_diffusion(
    records: &[DatasetRecord],
    aligner: &AlignerModel,
    config: &DiffusionTrainConfig,
    checkpoint: Option<&Path>,
    mut on_epoch: impl FnMut(usize, f64, f64),
) -> Result<(DiffusionModel, TrainReport)> {
    let first = records.first().ok_or_else(|| Error::validation("training set is empty"))?;
    let normalizer = Normalizer::fit(records)?;
    let mut model = DiffusionModel::new(
        config.clone(),
        aligner.clone(),
        normalizer,
        first.motion.skeleton.clone(),
        first.motion.fps,
    )?;
    let set = TrainingSet::new(records, &model.aligner, &model.normalizer)?;
    let mut adam = Adam::new(
        &model.denoiser.store,
        AdamConfig {
            lr: config.lr,
            ..Default::default()
        },
    );
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(2);
    let mut order: Vec<usize> = (0..set.len()).collect();
    let mut report = TrainReport::default();
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let (mut rec_sum, mut align_sum) = (0.0, 0.0);
        for batch in order.chunks(config.batch) {
            let mut grads = GradBuffer::zeros_like(&model.denoiser.store);
            for &k in batch {
                let (rec, align, g) = sample_gradient(&model, &set, k, batch.len(), &mut rng)?;
                if !(rec.is_finite() && align.is_finite()) {
                    return Err(Error::Diverged(format!(
                        "epoch {epoch} step {} record {k}: reconstruction {rec}, alignment {align}",
                        report.steps
                    )));
                }
                rec_sum += rec;
                align_sum += align;
                grads.accumulate(&g);
            }
            grads.clip_global_norm(config.grad_clip);
            adam.step(&mut model.denoiser.store, &grads).map_err(|e| match e {
                diffnet::Error::NonFiniteGradient(n) | diffnet::Error::NonFiniteParameter(n) => {
                    Error::Diverged(format!("epoch {epoch} step {}: non-finite values in `{n}`", report.steps))
                }
                other => other.into(),
            })?;
            report.steps += 1;
        }
        let n = set.len() as f64;
        let (rec, align) = (rec_sum / n, align_sum / n);
        log::info!("diffusion epoch {epoch}: reconstruction {rec:.5} alignment {align:.4}");
        report.epochs.push((rec, align));
        on_epoch(epoch, rec, align);
        if let Some(path) = checkpoint {
            model.save(path)?;
        }
    }
    Ok((model, report))
}

/// Loss terms and scaled gradient of one training sample.
fn sample_gradient(
    model: &DiffusionModel,
    set: &TrainingSet,
    k: usize,
    batch: usize,
    rng: &mut ChaCha8Rng,
) -> Result<(f64, f64, GradBuffer)> {
    let cfg = &model.config;
    let x0 = &set.x0[k];
    let t = rng.random_range(1..=cfg.t_steps);
    let eps = standard_normal(x0.shape(), rng);
    let x_t = q_sample(x0, t, &eps, &model.schedule)?;
    let drop = rng.random::<f64>() < cfg.p_uncond;
    let mask_all = rng.random::<f64>() < cfg.p_mask;

    let guide = if cfg.backbone == Backbone::Decoder && cfg.use_guide && !drop && !mask_all {
        // Preliminary prediction, treated as a constant.
        let cond = Condition {
            text: &set.text[k],
            guide: None,
        };
        let prelim = model.denoiser.predict(&x_t, t, Some(&cond))?;
        Some(model.guide_for(&set.targets[k], &prelim)?)
    } else {
        None
    };
    let cond = Condition {
        text: &set.text[k],
        guide: guide.as_ref(),
    };

    let mut g = Graph::new();
    let x = g.constant(x_t);
    let pred = model.denoiser.forward(&mut g, x, t, (!drop).then_some(&cond))?;
    let target = g.constant(x0.clone());
    let rec = g.mse(pred, target)?;
    let mut loss = rec;
    let mut align_value = 0.0;
    if cfg.lambda_kp > 0.0 && !drop {
        let a = model.align_term(&mut g, pred, &set.targets[k])?;
        align_value = g.scalar(a);
        let weighted = g.scale(a, cfg.lambda_kp);
        loss = g.add(rec, weighted)?;
    }
    let rec_value = g.scalar(rec);
    let scaled = g.scale(loss, 1.0 / batch as f64);
    let grads = g.backward(scaled)?.for_store(&model.denoiser.store);
    Ok((rec_value, align_value, grads))
}

/// Loss of one sample at a fixed timestep and noise, for gradient checks.
pub(crate) fn fixed_loss(
    g: &mut Graph,
    model: &DiffusionModel,
    x0: &Tensor,
    x_t: &Tensor,
    t: usize,
    text: &Tensor,
    guide: Option<&GuideToken>,
    targets: &AlignTargets,
) -> Result<Var> {
    let cond = Condition { text, guide };
    let x = g.constant(x_t.clone());
    let pred = model.denoiser.forward(g, x, t, Some(&cond))?;
    let target = g.constant(x0.clone());
    let rec = g.mse(pred, target)?;
    let a = model.align_term(g, pred, targets)?;
    let a = g.scale(a, model.config.lambda_kp);
    Ok(g.add(rec, a)?)
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::alignment::AlignerConfig;
    use crate::kp::default_catalog;
    use crate::motion::{generate_dataset, GeneratorConfig};

    pub(crate) fn tiny_aligner() -> AlignerModel {
        let cfg = AlignerConfig {
            d_text: 8,
            hidden: 8,
            d_model: 8,
            heads: 2,
            ..Default::default()
        };
        AlignerModel::new(cfg, default_catalog(&Skeleton::standard())).unwrap()
    }

    fn records(n: usize) -> Vec<DatasetRecord> {
        let cfg = GeneratorConfig {
            max_commands: 2,
            min_duration: 5,
            max_duration: 8,
            ..Default::default()
        };
        generate_dataset(n, &cfg, &Skeleton::standard(), 8).unwrap()
    }

    fn tiny(backbone: Backbone) -> DiffusionTrainConfig {
        DiffusionTrainConfig {
            backbone,
            t_steps: 20,
            width: 16,
            depth: 1,
            heads: 2,
            epochs: 2,
            batch: 4,
            seed: 3,
            ..Default::default()
        }
    }

    #[test]
    fn normalizer_round_trip() {
        let recs = records(5);
        let n = Normalizer::fit(&recs).unwrap();
        let x = n.normalize(&recs[0].motion);
        let back = n.denormalize(&x);
        assert!(back.max_abs_diff(&recs[0].motion.to_tensor()) < 1e-9);
    }

    #[test]
    fn training_is_deterministic_and_checkpoints_round_trip() {
        let recs = records(6);
        let al = tiny_aligner();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        for bb in [Backbone::Encoder, Backbone::Decoder] {
            let (a, rep) = train_diffusion(&recs, &al, &tiny(bb), Some(&path), |_, _, _| {}).unwrap();
            let (b, _) = train_diffusion(&recs, &al, &tiny(bb), None, |_, _, _| {}).unwrap();
            assert_eq!(a.denoiser.store, b.denoiser.store);
            assert_eq!(rep.epochs.len(), 2);
            assert_eq!(rep.steps, 4);
            let back = DiffusionModel::load(&path).unwrap();
            assert_eq!(back.denoiser.store, a.denoiser.store);
            assert_eq!(back.normalizer, a.normalizer);
            assert_eq!(back.aligner.store.named_tensors(), a.aligner.store.named_tensors());
        }
    }

    #[test]
    fn overfits_a_single_record() {
        let recs = records(1);
        let cfg = DiffusionTrainConfig {
            epochs: 500,
            batch: 1,
            width: 32,
            depth: 2,
            lr: 1e-3,
            ..tiny(Backbone::Decoder)
        };
        let (_, rep) = train_diffusion(&recs, &tiny_aligner(), &cfg, None, |_, _, _| {}).unwrap();
        assert_eq!(rep.steps, 500);
        let tail: f64 = rep.epochs[450..].iter().map(|e| e.0).sum::<f64>() / 50.0;
        assert!(tail < 0.01, "reconstruction {tail}");
    }
}
