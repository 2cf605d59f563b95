//! Finite-difference checks of the differentiable pipeline on small random
//! instances. Each returns the per-tensor report so callers pick the
//! tolerance.

use diffnet::gradcheck::{check_input, check_params, GradCheckReport, TensorCheck};
use diffnet::{Graph, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::alignment::{AlignerConfig, AlignerModel};
use crate::diffusion::{embed_parts, fixed_loss, q_sample, Backbone, DiffusionModel, DiffusionTrainConfig, GuideToken, Normalizer};
use crate::error::{Error, Result};
use crate::kp::{default_catalog, raw_graph, smooth_graph, KpCatalog};
use crate::motion::Skeleton;
use crate::text::{DecomposedPrompt, Source};

const FPS: f64 = 20.0;

fn perturb(store: &mut diffnet::ParamStore, scale: f64, rng: &mut ChaCha8Rng) {
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let noise = Tensor::randn(store.value(id).shape(), rng);
        for (v, n) in store.value_mut(id).data_mut().iter_mut().zip(noise.data()) {
            *v += scale * n;
        }
    }
}

fn two_part_prompt() -> Result<DecomposedPrompt> {
    DecomposedPrompt::new(
        "walk forward then wave",
        vec!["walk forward".into(), "wave".into()],
        Source::GroundTruth,
    )
}

fn catalog(n_kp: usize) -> KpCatalog {
    let mut c = default_catalog(&Skeleton::standard());
    c.phrases.truncate(n_kp);
    c
}

/// Random-walk positions whose raw phrase values all stay at least `margin`
/// away from the dead-zone kinks.
fn kink_free_positions(catalog: &KpCatalog, frames: usize, margin: f64, seed: u64) -> Result<Tensor> {
    let width = catalog.n_joints * 3;
    for attempt in 0..1000 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(attempt));
        let mut data = vec![0.0; frames * width];
        for c in 0..width {
            data[c] = rng.random_range(-1.0..1.0);
        }
        for t in 1..frames {
            for c in 0..width {
                data[t * width + c] = data[(t - 1) * width + c] + rng.random_range(-0.05..0.05);
            }
        }
        let pos = Tensor::new(&[frames, width], data)?;
        if !near_kink(&pos, catalog, margin)? {
            return Ok(pos);
        }
    }
    Err(Error::validation("no kink-free instance found"))
}

/// Whether any pre-dead-zone value lies within `margin` of its threshold.
fn near_kink(pos: &Tensor, catalog: &KpCatalog, margin: f64) -> Result<bool> {
    let mut free = catalog.clone();
    for p in &mut free.phrases {
        p.dead_zone = 0.0;
    }
    let mut g = Graph::new();
    let v = g.constant(pos.clone());
    let raw = raw_graph(&mut g, v, &free, FPS)?;
    let n = catalog.len();
    Ok(g.value(raw).data().iter().enumerate().any(|(i, &x)| {
        let d = catalog.phrases[i % n].dead_zone;
        d > 0.0 && (x.abs() - d).abs() < margin
    }))
}

/// Gradient of `Σ extract_smooth` with respect to joint positions.
pub fn check_extract_smooth(frames: usize, tau: f64, step: f64, seed: u64) -> Result<TensorCheck> {
    let catalog = default_catalog(&Skeleton::standard());
    // A position step moves velocities by step·fps; keep kinks well clear.
    let pos = kink_free_positions(&catalog, frames, 5.0 * step * FPS, seed)?;
    Ok(check_input(&pos, step, |g, x| {
        let kp = smooth_graph(g, x, &catalog, FPS, tau).map_err(to_net)?;
        Ok(g.sum(kp))
    })?)
}

fn to_net(e: Error) -> diffnet::Error {
    match e {
        Error::Net(inner) => inner,
        other => diffnet::Error::InvalidArgument(other.to_string()),
    }
}

/// Parameter gradients of the alignment loss for a two-part prompt.
pub fn check_align_loss(t_len: usize, n_kp: usize, step: f64, seed: u64) -> Result<GradCheckReport> {
    let cfg = AlignerConfig {
        d_text: 6,
        hidden: 6,
        d_model: 8,
        heads: 2,
        seed,
        ..Default::default()
    };
    let mut model = AlignerModel::new(cfg, catalog(n_kp))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Move off the zero-initialised heads so every path carries gradient.
    perturb(&mut model.store, 0.1, &mut rng);
    let prompt = two_part_prompt()?;
    let kp = Tensor::randn(&[t_len, n_kp], &mut rng).map(f64::tanh);
    Ok(check_params(&model.store, step, |g, store| {
        let mut probe = model.clone();
        probe.store = store.clone();
        let run = |g: &mut Graph| -> Result<diffnet::Var> {
            let text = probe.embed(g, &prompt)?;
            let out = probe.forward(g, text, t_len)?;
            let k = g.constant(kp.clone());
            probe.loss(g, &out, k)
        };
        run(g).map_err(to_net)
    })?)
}

/// Parameter gradients of the full training loss (reconstruction plus
/// weighted alignment, active guide tokens) on a micro decoder model.
pub fn check_training_loss(t_len: usize, step: f64, seed: u64) -> Result<GradCheckReport> {
    let skeleton = Skeleton::standard();
    let cat = default_catalog(&skeleton);
    let n_features = skeleton.n_joints() * 3;
    let aligner = AlignerModel::new(
        AlignerConfig {
            d_text: 6,
            hidden: 6,
            d_model: 8,
            heads: 2,
            seed,
            ..Default::default()
        },
        cat,
    )?;
    let config = DiffusionTrainConfig {
        backbone: Backbone::Decoder,
        t_steps: 10,
        width: 8,
        depth: 1,
        heads: 2,
        ff_mult: 2,
        lambda_kp: 0.5,
        seed,
        ..Default::default()
    };
    let normalizer = Normalizer {
        mean: vec![0.0; n_features],
        std: vec![0.5; n_features],
    };
    let mut model = DiffusionModel::new(config, aligner, normalizer, skeleton, FPS)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    perturb(&mut model.denoiser.store, 0.1, &mut rng);
    let prompt = two_part_prompt()?;
    let text = embed_parts(&model.aligner, &prompt)?;
    let targets = model.aligner.targets(&prompt, t_len)?;
    let x0 = Tensor::randn(&[t_len, n_features], &mut rng);
    let eps = Tensor::randn(&[t_len, n_features], &mut rng);
    let t = 4;
    let x_t = q_sample(&x0, t, &eps, &model.schedule)?;
    let guide = GuideToken::active(Tensor::randn(&[prompt.len(), model.aligner.n_kp()], &mut rng))?;
    Ok(check_params(&model.denoiser.store, step, |g, store| {
        let mut probe = model.clone();
        probe.denoiser.store = store.clone();
        fixed_loss(g, &probe, &x0, &x_t, t, &text, Some(&guide), &targets).map_err(to_net)
    })?)
}
