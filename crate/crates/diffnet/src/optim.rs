use crate::error::{Error, Result};
use crate::params::{round_f32, GradBuffer, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Bias-corrected Adam. Moment buffers are aligned with the store the
/// optimizer was created for.
#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: u64,
}

impl Adam {
    pub fn new(store: &ParamStore, config: AdamConfig) -> Self {
        let zeros = |s: &ParamStore| -> Vec<Vec<f64>> {
            s.iter().map(|(_, p)| vec![0.0; p.value.numel()]).collect()
        };
        Self {
            config,
            m: zeros(store),
            v: zeros(store),
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One update using the configured learning rate.
    pub fn step(&mut self, store: &mut ParamStore, grads: &GradBuffer) -> Result<()> {
        let lr = self.config.lr;
        self.step_with_lr(store, grads, lr)
    }

    /// One update with an explicit learning rate (for schedules). Fails
    /// without touching any parameter if a gradient is non-finite.
    pub fn step_with_lr(&mut self, store: &mut ParamStore, grads: &GradBuffer, lr: f64) -> Result<()> {
        if grads.as_slices().len() != self.m.len() {
            return Err(Error::InvalidArgument(format!(
                "optimizer tracks {} parameters, got gradients for {}",
                self.m.len(),
                grads.as_slices().len()
            )));
        }
        for (id, p) in store.iter() {
            let g = grads.get(id);
            if g.len() != p.value.numel() {
                return Err(Error::shape("adam", p.value.shape(), &[g.len()]));
            }
            if g.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFiniteGradient(p.name.clone()));
            }
        }
        self.step += 1;
        let AdamConfig {
            beta1, beta2, eps, ..
        } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let i = id.index();
            let g = grads.get(id);
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let values = store.value_mut(id).data_mut();
            for j in 0..values.len() {
                m[j] = beta1 * m[j] + (1.0 - beta1) * g[j];
                v[j] = beta2 * v[j] + (1.0 - beta2) * g[j] * g[j];
                let mh = m[j] / bc1;
                let vh = v[j] / bc2;
                values[j] = round_f32(values[j] - lr * mh / (vh.sqrt() + eps));
            }
        }
        Ok(())
    }
}
