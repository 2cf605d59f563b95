use std::path::Path;

use diffnet::{sinusoidal, Activation, Adam, AdamConfig, Checkpoint, EncoderBlock, Graph, Linear, Mlp, ParamStore, Tensor, Var};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffusion::Normalizer;
use crate::error::{read_file, write_file, Error, Result};
use crate::motion::{DatasetRecord, MotionSequence};
use crate::text::{decompose_rules, TextEmbedder};

pub const CHECKPOINT_FORMAT: &str = "kineta-evaluator/1";

/// Velocities are differences of normalized positions; this brings them to
/// roughly unit scale.
const VELOCITY_SCALE: f64 = 10.0;
const NORM_EPS: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluatorConfig {
    pub d_eval: usize,
    pub d_text: usize,
    pub width: usize,
    pub depth: usize,
    pub heads: usize,
    pub temperature: f64,
    /// Epochs always trained.
    pub epochs: usize,
    /// Training continues past `epochs` until the validation margin is met,
    /// up to this many.
    pub max_epochs: usize,
    pub margin: f64,
    pub batch: usize,
    pub lr: f64,
    pub val_fraction: f64,
    pub seed: u64,
}

impl Default for EvaluatorConfig {
    fn default() -> Self {
        Self {
            d_eval: 32,
            d_text: 32,
            width: 32,
            depth: 2,
            heads: 4,
            temperature: 0.1,
            epochs: 30,
            max_epochs: 100,
            margin: 0.2,
            batch: 32,
            lr: 1e-3,
            val_fraction: 0.1,
            seed: 0,
        }
    }
}

impl EvaluatorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_eval == 0 || self.d_text == 0 || self.width == 0 || self.depth == 0 {
            return Err(Error::validation("evaluator dimensions must be positive"));
        }
        if self.heads == 0 || self.width % self.heads != 0 {
            return Err(Error::validation(format!(
                "evaluator width {} is not divisible by {} heads",
                self.width, self.heads
            )));
        }
        if !(self.temperature > 0.0) || !(self.lr > 0.0) {
            return Err(Error::validation("evaluator temperature and lr must be positive"));
        }
        if self.batch < 2 {
            return Err(Error::validation("contrastive batches need at least 2 pairs"));
        }
        if self.max_epochs < self.epochs {
            return Err(Error::validation("evaluator max_epochs is below epochs"));
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return Err(Error::validation("evaluator val_fraction must lie in (0, 1)"));
        }
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
struct Metadata {
    format: String,
    vocabulary_version: String,
    config: EvaluatorConfig,
    normalizer: Normalizer,
}

/// Contrastive motion and text encoders with unit-norm outputs.
#[derive(Clone, Debug)]
pub struct EvaluatorModel {
    pub config: EvaluatorConfig,
    pub store: ParamStore,
    pub normalizer: Normalizer,
    embedder: TextEmbedder,
    part_mlp: Mlp,
    text_out: Linear,
    motion_in: Linear,
    blocks: Vec<EncoderBlock>,
    motion_out: Linear,
}

fn unit_rows(g: &mut Graph, x: Var) -> Result<Var> {
    let sq = g.square(x);
    let n = g.sum_axis(sq, 1)?;
    let n = g.add_scalar(n, NORM_EPS);
    let n = g.sqrt(n);
    Ok(g.div(x, n)?)
}

/// Rule-based parts of a prompt, or the prompt itself if it has none.
fn text_parts(text: &str) -> Vec<String> {
    decompose_rules(text).map(|p| p.parts).unwrap_or_else(|_| vec![text.to_string()])
}

impl EvaluatorModel {
    pub fn new(config: EvaluatorConfig, normalizer: Normalizer) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new("evaluator");
        let c = normalizer.mean.len();
        let w = config.width;
        let embedder = TextEmbedder::new(&mut store, "text.embed", config.d_text, &mut rng);
        let part_mlp = Mlp::new(&mut store, "text.part", config.d_text, w, w, Activation::Gelu, &mut rng);
        let text_out = Linear::new(&mut store, "text.out", w, config.d_eval, &mut rng);
        let motion_in = Linear::new(&mut store, "motion.in", 2 * c, w, &mut rng);
        let blocks = (0..config.depth)
            .map(|i| EncoderBlock::new(&mut store, &format!("motion.block{i}"), w, config.heads, 2 * w, &mut rng))
            .collect::<diffnet::Result<_>>()?;
        let motion_out = Linear::new(&mut store, "motion.out", w, config.d_eval, &mut rng);
        Ok(Self {
            config,
            store,
            normalizer,
            embedder,
            part_mlp,
            text_out,
            motion_in,
            blocks,
            motion_out,
        })
    }

    /// `[T, 2C]` normalized positions and scaled frame differences.
    pub fn motion_input(&self, motion: &MotionSequence) -> Result<Tensor> {
        let x = self.normalizer.normalize(motion);
        let (t, c) = (x.rows(), x.cols());
        if c != self.normalizer.mean.len() {
            return Err(Error::validation("motion does not match the evaluator skeleton"));
        }
        let mut out = vec![0.0; t * 2 * c];
        for f in 0..t {
            let row = x.row_slice(f);
            out[f * 2 * c..f * 2 * c + c].copy_from_slice(row);
            if f > 0 {
                let prev = x.row_slice(f - 1);
                for k in 0..c {
                    out[f * 2 * c + c + k] = (row[k] - prev[k]) * VELOCITY_SCALE;
                }
            }
        }
        Ok(Tensor::matrix(t, 2 * c, out)?)
    }

    fn encode_motion(&self, g: &mut Graph, input: &Tensor) -> Result<Var> {
        let t = input.rows();
        let x = g.constant(input.clone());
        let h = self.motion_in.forward(g, &self.store, x)?;
        let positions: Vec<f64> = (0..t).map(|i| i as f64).collect();
        let pe = g.constant(sinusoidal(&positions, self.config.width));
        let mut h = g.add(h, pe)?;
        for b in &self.blocks {
            h = b.forward(g, &self.store, h, None)?;
        }
        let pooled = g.mean_axis(h, 0)?;
        let out = self.motion_out.forward(g, &self.store, pooled)?;
        unit_rows(g, out)
    }

    fn encode_text(&self, g: &mut Graph, text: &str) -> Result<Var> {
        let parts = text_parts(text);
        let e = self.embedder.forward(g, &self.store, &parts)?;
        let positions: Vec<f64> = (0..parts.len()).map(|i| i as f64).collect();
        let pe = g.constant(sinusoidal(&positions, self.config.d_text));
        let e = g.add(e, pe)?;
        let h = self.part_mlp.forward(g, &self.store, e)?;
        let pooled = g.mean_axis(h, 0)?;
        let out = self.text_out.forward(g, &self.store, pooled)?;
        unit_rows(g, out)
    }

    /// `[N, d_eval]` unit-norm motion features.
    pub fn motion_features(&self, motions: &[&MotionSequence]) -> Result<Tensor> {
        let mut data = Vec::with_capacity(motions.len() * self.config.d_eval);
        for m in motions {
            let mut g = Graph::new();
            let input = self.motion_input(m)?;
            let v = self.encode_motion(&mut g, &input)?;
            data.extend_from_slice(g.value(v).data());
        }
        Ok(Tensor::matrix(motions.len(), self.config.d_eval, data)?)
    }

    /// `[N, d_eval]` unit-norm text features.
    pub fn text_features(&self, texts: &[&str]) -> Result<Tensor> {
        let mut data = Vec::with_capacity(texts.len() * self.config.d_eval);
        for t in texts {
            let mut g = Graph::new();
            let v = self.encode_text(&mut g, t)?;
            data.extend_from_slice(g.value(v).data());
        }
        Ok(Tensor::matrix(texts.len(), self.config.d_eval, data)?)
    }

    /// Symmetric InfoNCE over one batch of matched pairs.
    fn batch_loss(&self, g: &mut Graph, inputs: &[&Tensor], texts: &[&str]) -> Result<Var> {
        let b = inputs.len();
        let mut ms = Vec::with_capacity(b);
        let mut ts = Vec::with_capacity(b);
        for (input, text) in inputs.iter().zip(texts) {
            ms.push(self.encode_motion(g, input)?);
            ts.push(self.encode_text(g, text)?);
        }
        let m = g.concat(&ms, 0)?;
        let t = g.concat(&ts, 0)?;
        let tt = g.transpose(t)?;
        let sim = g.matmul(m, tt)?;
        let logits = g.scale(sim, 1.0 / self.config.temperature);
        let eye = g.constant(Tensor::identity(b));
        let mut total = None;
        for l in [logits, g.transpose(logits)?] {
            let p = g.softmax(l)?;
            let lp = g.ln(p);
            let diag = g.mul(lp, eye)?;
            let s = g.sum(diag);
            total = Some(match total {
                None => s,
                Some(prev) => g.add(prev, s)?,
            });
        }
        let total = total.expect("two directions");
        Ok(g.scale(total, -0.5 / b as f64))
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let meta = Metadata {
            format: CHECKPOINT_FORMAT.into(),
            vocabulary_version: self.embedder.vocabulary.version(),
            config: self.config.clone(),
            normalizer: self.normalizer.clone(),
        };
        let text = toml::to_string(&meta).map_err(|e| Error::validation(format!("evaluator metadata: {e}")))?;
        let mut ck = Checkpoint::new(text);
        ck.push_store("", &self.store);
        Ok(ck)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let meta: Metadata = toml::from_str(&ck.metadata)
            .map_err(|e| Error::parse(0, format!("evaluator metadata: {}", e.message())))?;
        if meta.format != CHECKPOINT_FORMAT {
            return Err(Error::validation(format!("not an evaluator checkpoint: `{}`", meta.format)));
        }
        let mut model = Self::new(meta.config, meta.normalizer)?;
        if model.embedder.vocabulary.version() != meta.vocabulary_version {
            return Err(Error::validation("evaluator checkpoint was trained with a different vocabulary"));
        }
        ck.load_store("", &mut model.store)?;
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_file(path, &self.to_checkpoint()?.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::from_bytes(&read_file(path)?)?)
    }
}

/// Matched versus mismatched cosine on held-out pairs.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValidationStats {
    /// Mean matched cosine minus mean mismatched cosine.
    pub margin: f64,
    /// Share of pairs whose matched cosine beats their mean mismatched one.
    pub match_rate: f64,
}

pub fn validation_stats(model: &EvaluatorModel, records: &[DatasetRecord]) -> Result<ValidationStats> {
    if records.len() < 2 {
        return Err(Error::validation("validation needs at least 2 records"));
    }
    let motions: Vec<&MotionSequence> = records.iter().map(|r| &r.motion).collect();
    let texts: Vec<&str> = records.iter().map(|r| r.full_text.as_str()).collect();
    let m = model.motion_features(&motions)?;
    let t = model.text_features(&texts)?;
    let n = records.len();
    let dot = |i: usize, j: usize| -> f64 { m.row_slice(i).iter().zip(t.row_slice(j)).map(|(a, b)| a * b).sum() };
    let (mut matched, mut mismatched, mut wins) = (0.0, 0.0, 0usize);
    for i in 0..n {
        let own = dot(i, i);
        let others = (0..n).filter(|&j| j != i).map(|j| dot(i, j)).sum::<f64>() / (n - 1) as f64;
        matched += own;
        mismatched += others;
        wins += usize::from(own > others);
    }
    Ok(ValidationStats {
        margin: (matched - mismatched) / n as f64,
        match_rate: wins as f64 / n as f64,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvaluatorReport {
    pub epoch_losses: Vec<f64>,
    pub validation: ValidationStats,
    pub margin_reached: bool,
}

/// Trains both encoders contrastively on `(motion, full_text)` pairs. The
/// last `val_fraction` of `records` is held out for the margin check.
pub fn train_evaluator(
    records: &[DatasetRecord],
    config: &EvaluatorConfig,
    mut on_epoch: impl FnMut(usize, f64, ValidationStats),
) -> Result<(EvaluatorModel, EvaluatorReport)> {
    config.validate()?;
    let n_val = ((records.len() as f64 * config.val_fraction).round() as usize).max(2);
    if records.len() < n_val + config.batch {
        return Err(Error::validation(format!(
            "evaluator needs at least {} records, got {}",
            n_val + config.batch,
            records.len()
        )));
    }
    let (train, val) = records.split_at(records.len() - n_val);
    let mut model = EvaluatorModel::new(config.clone(), Normalizer::fit(train)?)?;
    let inputs = train.iter().map(|r| model.motion_input(&r.motion)).collect::<Result<Vec<_>>>()?;
    let mut adam = Adam::new(
        &model.store,
        AdamConfig {
            lr: config.lr,
            ..Default::default()
        },
    );
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(3);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut epoch_losses = Vec::new();
    let mut stats = validation_stats(&model, val)?;
    for epoch in 0..config.max_epochs {
        if epoch >= config.epochs && stats.margin >= config.margin {
            break;
        }
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut batches = 0usize;
        // Full batches only: a pair of one would have no negatives.
        for batch in order.chunks_exact(config.batch) {
            let ins: Vec<&Tensor> = batch.iter().map(|&k| &inputs[k]).collect();
            let texts: Vec<&str> = batch.iter().map(|&k| train[k].full_text.as_str()).collect();
            let mut g = Graph::new();
            let loss = model.batch_loss(&mut g, &ins, &texts)?;
            let value = g.scalar(loss);
            if !value.is_finite() {
                return Err(Error::Diverged(format!("evaluator epoch {epoch}: loss {value}")));
            }
            total += value;
            batches += 1;
            let grads = g.backward(loss)?.for_store(&model.store);
            adam.step(&mut model.store, &grads)?;
        }
        let mean = total / batches as f64;
        stats = validation_stats(&model, val)?;
        log::info!(
            "evaluator epoch {epoch}: loss {mean:.4} margin {:.3} match {:.3}",
            stats.margin,
            stats.match_rate
        );
        epoch_losses.push(mean);
        on_epoch(epoch, mean, stats);
    }
    let reached = stats.margin >= config.margin;
    if !reached {
        log::warn!(
            "evaluator margin {:.3} below target {} after {} epochs",
            stats.margin,
            config.margin,
            epoch_losses.len()
        );
    }
    Ok((
        model,
        EvaluatorReport {
            epoch_losses,
            validation: stats,
            margin_reached: reached,
        },
    ))
}
