use std::path::Path;

use diffnet::{Adam, AdamConfig, Graph};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::alignment::{AlignMode, AlignerConfig, AlignerModel};
use crate::error::{Error, Result};
use crate::kp::{extract_smooth, KpCatalog, KpSequence};
use crate::motion::DatasetRecord;
use crate::text::{script_to_ground_truth, DecomposedPrompt};

/// One training pair: ground-truth decomposition and the smooth phrases of
/// the rendered motion.
#[derive(Clone, Debug)]
pub struct AlignExample {
    pub prompt: DecomposedPrompt,
    pub kp: KpSequence,
    pub segments: Vec<(usize, usize)>,
}

impl AlignExample {
    pub fn from_record(record: &DatasetRecord, catalog: &KpCatalog, tau: f64) -> Result<Self> {
        let mut prompt = script_to_ground_truth(&record.script);
        prompt.full_text = record.full_text.clone();
        Ok(Self {
            prompt,
            kp: extract_smooth(&record.motion, catalog, tau)?,
            segments: record.segment_bounds.clone(),
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AlignerTrainReport {
    pub initial_loss: f64,
    pub final_loss: f64,
    /// Mean per-record training loss of each epoch.
    pub epoch_losses: Vec<f64>,
}

impl AlignerTrainReport {
    /// Fraction by which training reduced the mean loss.
    pub fn reduction(&self) -> f64 {
        if self.initial_loss > 0.0 {
            1.0 - self.final_loss / self.initial_loss
        } else {
            0.0
        }
    }
}

pub fn mean_align_loss(model: &AlignerModel, examples: &[AlignExample]) -> Result<f64> {
    if examples.is_empty() {
        return Err(Error::validation("no alignment examples"));
    }
    let mut total = 0.0;
    for ex in examples {
        total += model.align_loss(&ex.prompt, &ex.kp)?;
    }
    Ok(total / examples.len() as f64)
}

/// Share of `(record, part)` pairs whose heaviest frame lies inside the
/// part's ground-truth segment. Examples whose part count differs from their
/// segment count are skipped.
pub fn localization_accuracy(model: &AlignerModel, examples: &[AlignExample]) -> Result<f64> {
    let (mut hits, mut total) = (0usize, 0usize);
    for ex in examples {
        if model.config.mode == AlignMode::Full || ex.prompt.len() != ex.segments.len() {
            continue;
        }
        for (dw, &(s, e)) in model.domain_weights(&ex.prompt, ex.kp.n_frames())?.iter().zip(&ex.segments) {
            let j = dw.argmax();
            hits += usize::from(j >= s && j < e);
            total += 1;
        }
    }
    if total == 0 {
        return Err(Error::validation("no examples with one part per segment"));
    }
    Ok(hits as f64 / total as f64)
}

/// Trains projector, domain net and text embedder jointly with Adam.
///
/// `checkpoint`, when given, is rewritten after every epoch. `on_epoch`
/// receives the epoch index and its mean training loss.
pub fn train_aligner(
    records: &[DatasetRecord],
    config: &AlignerConfig,
    catalog: KpCatalog,
    checkpoint: Option<&Path>,
    mut on_epoch: impl FnMut(usize, f64),
) -> Result<(AlignerModel, AlignerTrainReport)> {
    let mut model = AlignerModel::new(config.clone(), catalog)?;
    let examples = records
        .iter()
        .map(|r| AlignExample::from_record(r, &model.catalog, config.tau))
        .collect::<Result<Vec<_>>>()?;
    let initial_loss = mean_align_loss(&model, &examples)?;
    let mut adam = Adam::new(
        &model.store,
        AdamConfig {
            lr: config.lr,
            ..Default::default()
        },
    );
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(1);
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut epoch_losses = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut epoch_total = 0.0;
        for (b, batch) in order.chunks(config.batch).enumerate() {
            let mut g = Graph::new();
            let mut terms = Vec::with_capacity(batch.len());
            for &k in batch {
                let ex = &examples[k];
                let text = model.embed(&mut g, &ex.prompt)?;
                let out = model.forward(&mut g, text, ex.kp.n_frames())?;
                let kp = g.constant(ex.kp.values.clone());
                terms.push(model.loss(&mut g, &out, kp)?);
            }
            let stacked = g.concat(&terms, 0)?;
            let sum = g.sum(stacked);
            let loss = g.scale(sum, 1.0 / batch.len() as f64);
            let value = g.scalar(sum);
            if !value.is_finite() {
                return Err(diverged(&model, epoch, b, value));
            }
            epoch_total += value;
            let grads = g.backward(loss)?.for_store(&model.store);
            adam.step(&mut model.store, &grads).map_err(|e| match e {
                diffnet::Error::NonFiniteGradient(name) | diffnet::Error::NonFiniteParameter(name) => {
                    Error::Diverged(format!("epoch {epoch} batch {b}: non-finite values in `{name}`"))
                }
                other => other.into(),
            })?;
        }
        let mean = epoch_total / examples.len() as f64;
        log::info!("aligner epoch {epoch}: loss {mean:.5}");
        epoch_losses.push(mean);
        on_epoch(epoch, mean);
        if let Some(path) = checkpoint {
            model.save(path)?;
        }
    }
    let final_loss = mean_align_loss(&model, &examples)?;
    Ok((
        model,
        AlignerTrainReport {
            initial_loss,
            final_loss,
            epoch_losses,
        },
    ))
}

fn diverged(model: &AlignerModel, epoch: usize, batch: usize, loss: f64) -> Error {
    let first = model
        .store
        .iter()
        .find(|(_, p)| !p.value.is_finite())
        .map(|(_, p)| p.name.clone());
    match first {
        Some(name) => Error::Diverged(format!("epoch {epoch} batch {batch}: loss {loss}, first non-finite parameter `{name}`")),
        None => Error::Diverged(format!("epoch {epoch} batch {batch}: loss {loss}")),
    }
}
