//! Fine-grained text to kinematic-phrase alignment.
//!
//! Each decomposed part `i` of an `n`-part prompt owns a fixed feasible
//! window `[l_i, r_i]` over the motion. A small domain network places a
//! normalized Gaussian over the window's integer frames, the weighted phrase
//! vector `Ω_i` summarizes the motion there, and a two-layer projector maps
//! the part's text embedding into phrase space. The alignment loss is
//! `Σ_i ‖Ω_i − proj(T_i)‖²`.

mod model;
mod train;

use std::ops::Range;

use crate::error::{Error, Result};
use crate::kp::KpSequence;

pub(crate) use model::{guide_from, similarity_from};
pub use model::{AlignMode, AlignTargets, AlignerConfig, AlignerModel, AlignerOutputs, Similarity};
pub use train::{localization_accuracy, mean_align_loss, train_aligner, AlignExample, AlignerTrainReport};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FeasibleWindow {
    pub l: f64,
    pub r: f64,
}

impl FeasibleWindow {
    /// Integer frames `[⌊l⌋, ⌈r⌉)` clipped to the sequence.
    pub fn frames(&self, t_len: usize) -> Range<usize> {
        let start = self.l.floor().max(0.0) as usize;
        let end = (self.r.ceil() as usize).min(t_len);
        start..end
    }

    pub fn width(&self) -> f64 {
        self.r - self.l
    }
}

/// Window of the `i`-th (0-based) of `n` parts over `t_len` frames. A single
/// part covers the whole sequence.
pub fn feasible_window(i: usize, n: usize, t_len: usize) -> Result<FeasibleWindow> {
    if n == 0 {
        return Err(Error::validation("feasible window needs at least one part"));
    }
    if i >= n {
        return Err(Error::validation(format!("part index {i} out of range for {n} parts")));
    }
    if t_len < n {
        return Err(Error::validation(format!("{t_len} frames cannot hold {n} parts")));
    }
    let t = t_len as f64;
    if n == 1 {
        return Ok(FeasibleWindow { l: 0.0, r: t });
    }
    let nf = n as f64;
    let inv_log = 1.0 / (nf + 2.0).ln();
    let l = (i as f64 / (nf - 1.0)) * (t / nf) * (nf - 1.0 - inv_log);
    let r = l + (t / nf) * (1.0 + inv_log);
    Ok(FeasibleWindow { l, r })
}

pub fn feasible_windows(n: usize, t_len: usize) -> Result<Vec<FeasibleWindow>> {
    (0..n).map(|i| feasible_window(i, n, t_len)).collect()
}

/// Gaussian weights of one part over its window's integer frames.
#[derive(Clone, Debug, PartialEq)]
pub struct DomainWeights {
    pub mu: f64,
    pub sigma: f64,
    /// First frame covered by `weights`.
    pub start: usize,
    pub weights: Vec<f64>,
}

impl DomainWeights {
    pub fn frames(&self) -> Range<usize> {
        self.start..self.start + self.weights.len()
    }

    /// Frame with the largest weight (earliest on ties).
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (k, &w) in self.weights.iter().enumerate() {
            if w > self.weights[best] {
                best = k;
            }
        }
        self.start + best
    }
}

/// Normalized `exp(−(j − μ)² / 2σ²)` over the window's frames.
pub fn gaussian_weights(window: &FeasibleWindow, mu: f64, sigma: f64, t_len: usize) -> Result<DomainWeights> {
    let frames = window.frames(t_len);
    if frames.is_empty() || window.width() < 1.0 {
        return Err(Error::validation(format!(
            "window [{}, {}] is shorter than one frame",
            window.l, window.r
        )));
    }
    if !(sigma > 0.0) || !mu.is_finite() {
        return Err(Error::validation(format!("invalid Gaussian (mu {mu}, sigma {sigma})")));
    }
    let logits: Vec<f64> = frames
        .clone()
        .map(|j| -(j as f64 - mu).powi(2) / (2.0 * sigma * sigma))
        .collect();
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    Ok(DomainWeights {
        mu,
        sigma,
        start: frames.start,
        weights: exps.iter().map(|e| e / total).collect(),
    })
}

/// `Ω = Σ_j w_j kp[j, :]`.
pub fn weighted_kp(kp: &KpSequence, weights: &DomainWeights) -> Result<Vec<f64>> {
    let frames = weights.frames();
    if frames.end > kp.n_frames() {
        return Err(Error::validation(format!(
            "weights cover frames {:?} but the phrase sequence has {}",
            frames,
            kp.n_frames()
        )));
    }
    let mut omega = vec![0.0; kp.n_kp()];
    for (j, &w) in frames.zip(&weights.weights) {
        for (o, &v) in omega.iter_mut().zip(kp.values.row_slice(j)) {
            *o += w * v;
        }
    }
    Ok(omega)
}

/// Cosine similarity, defined as 0 when either vector is zero.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        (dot / (na * nb)).clamp(-1.0, 1.0)
    }
}
