//! Denoising diffusion over normalized joint positions.
//!
//! Denoisers predict the clean sample `x̂0` directly. Sampling uses the
//! DDPM posterior with fixed variance `β̃_t`, classifier-free guidance in
//! `x̂0` space, and (decoder backbone) guided denoise/re-diffuse rounds.

mod model;
mod sample;
mod train;

use diffnet::Tensor;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use model::{Backbone, Condition, Denoiser, DenoiserConfig, GuideToken};
pub use sample::{refine, sample, write_diagnostics, RefineOutput, RoundDiagnostics, SamplerConfig};
pub(crate) use train::{embed_parts, fixed_loss};
pub use train::{
    train_diffusion, CheckpointInfo, DiffusionModel, DiffusionTrainConfig, Normalizer, TrainReport, TrainingSet,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    Linear,
    Cosine,
}

/// Noise schedule tables. Timesteps are 1-based; `alpha_bar(0) = 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct DiffusionSchedule {
    pub kind: ScheduleKind,
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

pub const LINEAR_BETA_START: f64 = 1e-4;
pub const LINEAR_BETA_END: f64 = 0.02;
const COSINE_OFFSET: f64 = 0.008;
const COSINE_MAX_BETA: f64 = 0.999;

impl DiffusionSchedule {
    pub fn new(t_steps: usize, kind: ScheduleKind) -> Result<Self> {
        if t_steps == 0 {
            return Err(Error::validation("diffusion needs at least one step"));
        }
        let betas = match kind {
            ScheduleKind::Linear => {
                if t_steps == 1 {
                    vec![LINEAR_BETA_START]
                } else {
                    (0..t_steps)
                        .map(|i| {
                            LINEAR_BETA_START
                                + (LINEAR_BETA_END - LINEAR_BETA_START) * i as f64 / (t_steps - 1) as f64
                        })
                        .collect()
                }
            }
            ScheduleKind::Cosine => {
                let f = |t: f64| {
                    let x = (t / t_steps as f64 + COSINE_OFFSET) / (1.0 + COSINE_OFFSET) * std::f64::consts::FRAC_PI_2;
                    x.cos().powi(2)
                };
                (1..=t_steps)
                    .map(|t| (1.0 - f(t as f64) / f(t as f64 - 1.0)).min(COSINE_MAX_BETA))
                    .collect()
            }
        };
        Self::from_betas(kind, betas)
    }

    pub fn from_betas(kind: ScheduleKind, betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() || betas.iter().any(|&b| !(b > 0.0 && b < 1.0)) {
            return Err(Error::validation("every beta must lie in (0, 1)"));
        }
        let mut alpha_bars = Vec::with_capacity(betas.len());
        let mut acc = 1.0;
        for &b in &betas {
            acc *= 1.0 - b;
            alpha_bars.push(acc);
        }
        Ok(Self {
            kind,
            betas,
            alpha_bars,
        })
    }

    pub fn t_steps(&self) -> usize {
        self.betas.len()
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        1.0 - self.beta(t)
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bars[t - 1]
        }
    }

    /// Fixed reverse-step variance `β_t (1 − ᾱ_{t−1}) / (1 − ᾱ_t)`.
    pub fn posterior_variance(&self, t: usize) -> f64 {
        self.beta(t) * (1.0 - self.alpha_bar(t - 1)) / (1.0 - self.alpha_bar(t))
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.t_steps() {
            return Err(Error::validation(format!("timestep {t} outside 1..={}", self.t_steps())));
        }
        Ok(())
    }
}

fn same_shape(op: &str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::validation(format!("{op}: shape {:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

/// `x_t = √ᾱ_t x0 + √(1 − ᾱ_t) ε`.
pub fn q_sample(x0: &Tensor, t: usize, noise: &Tensor, schedule: &DiffusionSchedule) -> Result<Tensor> {
    schedule.check_t(t)?;
    same_shape("q_sample", x0, noise)?;
    let ab = schedule.alpha_bar(t);
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    let data = x0.data().iter().zip(noise.data()).map(|(x, e)| a * x + b * e).collect();
    Ok(Tensor::new(x0.shape(), data)?)
}

/// One ancestral step from `x_t` given the clean estimate `x̂0`. Noise is
/// drawn from `rng` for `t > 1` only.
pub fn p_step<R: Rng + ?Sized>(
    x_t: &Tensor,
    x0_hat: &Tensor,
    t: usize,
    schedule: &DiffusionSchedule,
    rng: &mut R,
) -> Result<Tensor> {
    schedule.check_t(t)?;
    same_shape("p_step", x_t, x0_hat)?;
    let (ab, ab_prev, beta) = (schedule.alpha_bar(t), schedule.alpha_bar(t - 1), schedule.beta(t));
    let c0 = ab_prev.sqrt() * beta / (1.0 - ab);
    let ct = schedule.alpha(t).sqrt() * (1.0 - ab_prev) / (1.0 - ab);
    let mut data: Vec<f64> = x0_hat.data().iter().zip(x_t.data()).map(|(x0, xt)| c0 * x0 + ct * xt).collect();
    if t > 1 {
        let sd = schedule.posterior_variance(t).sqrt();
        for v in &mut data {
            let z: f64 = rng.sample(StandardNormal);
            *v += sd * z;
        }
    }
    Ok(Tensor::new(x_t.shape(), data)?)
}

/// `(1 + w) cond − w uncond`.
pub fn cfg_combine(cond: &Tensor, uncond: &Tensor, w: f64) -> Result<Tensor> {
    same_shape("cfg_combine", cond, uncond)?;
    let data = cond.data().iter().zip(uncond.data()).map(|(c, u)| c + w * (c - u)).collect();
    Ok(Tensor::new(cond.shape(), data)?)
}

pub(crate) fn standard_normal<R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    Tensor::new(shape, data).expect("sized from shape")
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn linear_endpoints_and_monotone() {
        let s = DiffusionSchedule::new(1000, ScheduleKind::Linear).unwrap();
        assert_eq!(s.beta(1), 1e-4);
        assert!((s.beta(1000) - 0.02).abs() < 1e-15);
        for t in 1..1000 {
            assert!(s.alpha_bar(t + 1) < s.alpha_bar(t));
        }
        let c = DiffusionSchedule::new(100, ScheduleKind::Cosine).unwrap();
        assert!(c.alpha_bar(100) < c.alpha_bar(1));
        assert!(DiffusionSchedule::new(0, ScheduleKind::Linear).is_err());
    }

    #[test]
    fn alpha_bar_arithmetic() {
        let s = DiffusionSchedule::from_betas(ScheduleKind::Linear, vec![0.1; 3]).unwrap();
        assert!((s.alpha_bar(3) - 0.729).abs() < 1e-12);
        assert_eq!(s.posterior_variance(1), 0.0);
    }

    #[test]
    fn q_sample_zero_noise_and_inversion() {
        let s = DiffusionSchedule::new(50, ScheduleKind::Linear).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x0 = standard_normal(&[6, 3], &mut rng);
        let eps = standard_normal(&[6, 3], &mut rng);
        let zero = Tensor::zeros(&[6, 3]);
        let xt = q_sample(&x0, 20, &zero, &s).unwrap();
        for (a, b) in xt.data().iter().zip(x0.data()) {
            assert!((a - s.alpha_bar(20).sqrt() * b).abs() < 1e-15);
        }
        let xt = q_sample(&x0, 20, &eps, &s).unwrap();
        let ab = s.alpha_bar(20);
        for ((x, e), orig) in xt.data().iter().zip(eps.data()).zip(x0.data()) {
            assert!(((x - (1.0 - ab).sqrt() * e) / ab.sqrt() - orig).abs() < 1e-6);
        }
        assert!(q_sample(&x0, 0, &eps, &s).is_err());
        assert!(q_sample(&x0, 1, &Tensor::zeros(&[2, 3]), &s).is_err());
    }

    #[test]
    fn p_step_last_step_is_mean() {
        let s = DiffusionSchedule::new(10, ScheduleKind::Linear).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let xt = standard_normal(&[4, 2], &mut rng);
        let x0 = standard_normal(&[4, 2], &mut rng);
        let a = p_step(&xt, &x0, 1, &s, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let b = p_step(&xt, &x0, 1, &s, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        assert_eq!(a, b);
        // ᾱ_0 = 1 makes the mean exactly x̂0.
        for (u, v) in a.data().iter().zip(x0.data()) {
            assert!((u - v).abs() < 1e-12);
        }
        assert!(p_step(&xt, &x0, 0, &s, &mut rng).is_err());
    }

    #[test]
    fn oracle_denoising_recovers_x0() {
        let s = DiffusionSchedule::new(30, ScheduleKind::Linear).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x0 = standard_normal(&[5, 3], &mut rng);
        let eps = standard_normal(&[5, 3], &mut rng);
        let mut x = q_sample(&x0, 30, &eps, &s).unwrap();
        for t in (1..=30).rev() {
            x = p_step(&x, &x0, t, &s, &mut rng).unwrap();
        }
        assert!(x.max_abs_diff(&x0) < 1e-12);
    }

    #[test]
    fn cfg_identities() {
        let c = Tensor::row(vec![1.0, -2.0, 0.5]);
        let u = Tensor::row(vec![0.25, 4.0, 0.5]);
        assert_eq!(cfg_combine(&c, &u, 0.0).unwrap(), c);
        let two: Vec<f64> = c.data().iter().zip(u.data()).map(|(a, b)| 2.0 * a - b).collect();
        assert_eq!(cfg_combine(&c, &u, 1.0).unwrap().data(), &two[..]);
        assert_eq!(cfg_combine(&c, &c, 3.7).unwrap(), c);
    }
}
