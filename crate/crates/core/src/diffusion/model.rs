use diffnet::{
    sinusoidal, DecoderBlock, EncoderBlock, Graph, LayerNorm, Linear, ParamId, ParamStore, Tensor, Var,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::alignment::feasible_windows;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Backbone {
    /// Self-attention over `[z_tk, frames]` with one pooled condition token.
    Encoder,
    /// Frames cross-attend to per-part text tokens and guide tokens.
    Decoder,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DenoiserConfig {
    pub backbone: Backbone,
    /// Values per frame (`3 * joints`).
    pub n_features: usize,
    pub d_text: usize,
    pub n_kp: usize,
    pub width: usize,
    pub depth: usize,
    pub heads: usize,
    pub ff_mult: usize,
    pub seed: u64,
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_features == 0 || self.d_text == 0 || self.n_kp == 0 || self.width == 0 || self.depth == 0 {
            return Err(Error::validation("denoiser dimensions must be positive"));
        }
        if self.heads == 0 || self.width % self.heads != 0 {
            return Err(Error::validation(format!(
                "denoiser width {} is not divisible into {} heads",
                self.width, self.heads
            )));
        }
        if self.ff_mult == 0 {
            return Err(Error::validation("ff_mult must be positive"));
        }
        Ok(())
    }
}

/// Per-part guide vectors and their activity mask.
#[derive(Clone, Debug, PartialEq)]
pub struct GuideToken {
    /// `[P, n_kp]`.
    pub vectors: Tensor,
    pub active: Vec<bool>,
}

impl GuideToken {
    pub fn new(vectors: Tensor, active: Vec<bool>) -> Result<Self> {
        if vectors.shape().len() != 2 || vectors.rows() != active.len() {
            return Err(Error::validation(format!(
                "guide of shape {:?} with {} mask entries",
                vectors.shape(),
                active.len()
            )));
        }
        if !vectors.is_finite() {
            return Err(Error::validation("guide vectors must be finite"));
        }
        Ok(Self { vectors, active })
    }

    pub fn active(vectors: Tensor) -> Result<Self> {
        let n = vectors.rows();
        Self::new(vectors, vec![true; n])
    }

    pub fn masked(parts: usize, n_kp: usize) -> Self {
        Self {
            vectors: Tensor::zeros(&[parts, n_kp]),
            active: vec![false; parts],
        }
    }

    pub fn any_active(&self) -> bool {
        self.active.iter().any(|&a| a)
    }

    /// Mean L2 norm over parts.
    pub fn mean_norm(&self) -> f64 {
        let p = self.vectors.rows();
        (0..p)
            .map(|i| self.vectors.row_slice(i).iter().map(|x| x * x).sum::<f64>().sqrt())
            .sum::<f64>()
            / p as f64
    }
}

/// Text condition of one sample: `[P, d_text]` part embeddings and an
/// optional guide.
#[derive(Clone, Copy, Debug)]
pub struct Condition<'a> {
    pub text: &'a Tensor,
    pub guide: Option<&'a GuideToken>,
}

#[derive(Clone, Debug)]
enum Blocks {
    Encoder(Vec<EncoderBlock>),
    Decoder {
        blocks: Vec<DecoderBlock>,
        guide_proj: Linear,
        mask_token: ParamId,
    },
}

/// Clean-motion predictor `x̂0 = f(x_t, t, c)`.
#[derive(Clone, Debug)]
pub struct Denoiser {
    pub config: DenoiserConfig,
    pub store: ParamStore,
    in_proj: Linear,
    time1: Linear,
    time2: Linear,
    text_proj: Linear,
    null_token: ParamId,
    blocks: Blocks,
    final_norm: LayerNorm,
    out_proj: Linear,
}

impl Denoiser {
    pub fn new(config: DenoiserConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new("denoiser");
        let (w, ff) = (config.width, config.width * config.ff_mult);
        let in_proj = Linear::new(&mut store, "in_proj", config.n_features, w, &mut rng);
        let time1 = Linear::new(&mut store, "time.fc1", w, w, &mut rng);
        let time2 = Linear::new(&mut store, "time.fc2", w, w, &mut rng);
        let text_proj = Linear::new(&mut store, "text_proj", config.d_text, w, &mut rng);
        let null_token = store.add_normal("null_token", &[1, w], 0.02, &mut rng);
        let blocks = match config.backbone {
            Backbone::Encoder => Blocks::Encoder(
                (0..config.depth)
                    .map(|i| EncoderBlock::new(&mut store, &format!("block{i}"), w, config.heads, ff, &mut rng))
                    .collect::<diffnet::Result<_>>()?,
            ),
            Backbone::Decoder => {
                let guide_proj = Linear::new(&mut store, "guide_proj", config.n_kp, w, &mut rng);
                let mask_token = store.add_normal("mask_token", &[1, w], 0.02, &mut rng);
                let blocks = (0..config.depth)
                    .map(|i| DecoderBlock::new(&mut store, &format!("block{i}"), w, config.heads, ff, &mut rng))
                    .collect::<diffnet::Result<_>>()?;
                Blocks::Decoder {
                    blocks,
                    guide_proj,
                    mask_token,
                }
            }
        };
        let final_norm = LayerNorm::new(&mut store, "final_norm", w);
        let out_proj = Linear::zeros(&mut store, "out_proj", w, config.n_features);
        Ok(Self {
            config,
            store,
            in_proj,
            time1,
            time2,
            text_proj,
            null_token,
            blocks,
            final_norm,
            out_proj,
        })
    }

    pub fn backbone(&self) -> Backbone {
        self.config.backbone
    }

    fn check(&self, g: &Graph, x_t: Var, cond: Option<&Condition>) -> Result<usize> {
        let shape = g.shape(x_t);
        if shape.len() != 2 || shape[1] != self.config.n_features || shape[0] < 2 {
            return Err(Error::validation(format!(
                "denoiser input {shape:?} is not [frames >= 2, {}]",
                self.config.n_features
            )));
        }
        let t_len = shape[0];
        if let Some(c) = cond {
            if c.text.shape().len() != 2 || c.text.cols() != self.config.d_text || c.text.rows() == 0 {
                return Err(Error::validation(format!(
                    "condition {:?} is not [parts, {}]",
                    c.text.shape(),
                    self.config.d_text
                )));
            }
            if let Some(guide) = c.guide {
                if self.config.backbone == Backbone::Encoder {
                    return Err(Error::validation("the encoder backbone has no guide-token path"));
                }
                if guide.vectors.rows() != c.text.rows() || guide.vectors.cols() != self.config.n_kp {
                    return Err(Error::validation(format!(
                        "guide {:?} does not match {} parts of {} phrases",
                        guide.vectors.shape(),
                        c.text.rows(),
                        self.config.n_kp
                    )));
                }
            }
        }
        Ok(t_len)
    }

    /// Predicts `x̂0` for a `[T, n_features]` noisy input at step `t`.
    /// `cond = None` is the unconditional branch.
    pub fn forward(&self, g: &mut Graph, x_t: Var, t: usize, cond: Option<&Condition>) -> Result<Var> {
        let t_len = self.check(g, x_t, cond)?;
        let s = &self.store;
        let w = self.config.width;

        let te = g.constant(sinusoidal(&[t as f64], w));
        let te = self.time1.forward(g, s, te)?;
        let te = g.silu(te);
        let temb = self.time2.forward(g, s, te)?;

        let frames: Vec<f64> = (0..t_len).map(|j| j as f64).collect();
        let pe = g.constant(sinusoidal(&frames, w));
        let h = self.in_proj.forward(g, s, x_t)?;
        let h = g.add(h, pe)?;

        let out = match &self.blocks {
            Blocks::Encoder(blocks) => {
                let z = match cond {
                    Some(c) => {
                        let text = g.constant(c.text.clone());
                        let pooled = g.mean_axis(text, 0)?;
                        self.text_proj.forward(g, s, pooled)?
                    }
                    None => g.param(s, self.null_token),
                };
                let z = g.add(z, temb)?;
                let mut seq = g.concat(&[z, h], 0)?;
                for b in blocks {
                    seq = b.forward(g, s, seq, None)?;
                }
                g.slice(seq, 0, 1, t_len + 1)?
            }
            Blocks::Decoder {
                blocks,
                guide_proj,
                mask_token,
            } => {
                let memory = match cond {
                    Some(c) => self.memory(g, c, t_len, guide_proj, *mask_token)?,
                    None => g.param(s, self.null_token),
                };
                let mut x = g.add(h, temb)?;
                for b in blocks {
                    x = b.forward(g, s, x, memory, None)?;
                }
                x
            }
        };
        let out = self.final_norm.forward(g, s, out)?;
        Ok(self.out_proj.forward(g, s, out)?)
    }

    /// `[2P, width]`: part tokens then guide (or mask) tokens, each tagged
    /// with the positional code of its window center.
    fn memory(&self, g: &mut Graph, c: &Condition, t_len: usize, guide_proj: &Linear, mask_token: ParamId) -> Result<Var> {
        let s = &self.store;
        let p = c.text.rows();
        let centers: Vec<f64> = feasible_windows(p, t_len)?.iter().map(|w| 0.5 * (w.l + w.r)).collect();
        let pe = g.constant(sinusoidal(&centers, self.config.width));
        let text = g.constant(c.text.clone());
        let tt = self.text_proj.forward(g, s, text)?;
        let tt = g.add(tt, pe)?;

        let ones = g.constant(Tensor::full(&[p, 1], 1.0));
        let mask = g.param(s, mask_token);
        let mask_rows = g.matmul(ones, mask)?;
        let guide_rows = match c.guide.filter(|gd| gd.any_active()) {
            None => mask_rows,
            Some(gd) => {
                let v = g.constant(gd.vectors.clone());
                let gp = guide_proj.forward(g, s, v)?;
                let on: Vec<f64> = gd.active.iter().map(|&a| if a { 1.0 } else { 0.0 }).collect();
                let off: Vec<f64> = on.iter().map(|a| 1.0 - a).collect();
                let on = g.constant(Tensor::matrix(p, 1, on)?);
                let off = g.constant(Tensor::matrix(p, 1, off)?);
                let a = g.mul(gp, on)?;
                let b = g.mul(mask_rows, off)?;
                g.add(a, b)?
            }
        };
        let gt = g.add(guide_rows, pe)?;
        Ok(g.concat(&[tt, gt], 0)?)
    }

    /// Convenience forward without gradients.
    pub fn predict(&self, x_t: &Tensor, t: usize, cond: Option<&Condition>) -> Result<Tensor> {
        let mut g = Graph::new();
        let x = g.constant(x_t.clone());
        let y = self.forward(&mut g, x, t, cond)?;
        Ok(g.value(y).clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::standard_normal;

    fn config(backbone: Backbone) -> DenoiserConfig {
        DenoiserConfig {
            backbone,
            n_features: 6,
            d_text: 5,
            n_kp: 4,
            width: 8,
            depth: 2,
            heads: 2,
            ff_mult: 2,
            seed: 1,
        }
    }

    fn randomize(m: &mut Denoiser) {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let ids: Vec<_> = m.store.ids().collect();
        for id in ids {
            let shape = m.store.value(id).shape().to_vec();
            *m.store.value_mut(id) = standard_normal(&shape, &mut rng).map(|v| 0.3 * v);
        }
    }

    #[test]
    fn shapes_and_finiteness() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let text = standard_normal(&[3, 5], &mut rng);
        for bb in [Backbone::Encoder, Backbone::Decoder] {
            let mut m = Denoiser::new(config(bb)).unwrap();
            randomize(&mut m);
            let x = standard_normal(&[9, 6], &mut rng);
            for t in [1, 50, 100] {
                let c = Condition { text: &text, guide: None };
                let y = m.predict(&x, t, Some(&c)).unwrap();
                assert_eq!(y.shape(), &[9, 6]);
                assert!(y.is_finite());
                assert!(m.predict(&x, t, None).unwrap().is_finite());
            }
        }
    }

    #[test]
    fn encoder_rejects_guide() {
        let m = Denoiser::new(config(Backbone::Encoder)).unwrap();
        let text = Tensor::zeros(&[2, 5]);
        let guide = GuideToken::masked(2, 4);
        let c = Condition { text: &text, guide: Some(&guide) };
        let err = m.predict(&Tensor::zeros(&[4, 6]), 3, Some(&c)).unwrap_err();
        assert!(err.is_validation());
    }

    #[test]
    fn masked_guide_equals_absent_guide() {
        let mut m = Denoiser::new(config(Backbone::Decoder)).unwrap();
        randomize(&mut m);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let text = standard_normal(&[2, 5], &mut rng);
        let x = standard_normal(&[7, 6], &mut rng);
        let mut masked = GuideToken::masked(2, 4);
        masked.vectors = standard_normal(&[2, 4], &mut rng);
        let a = m.predict(&x, 5, Some(&Condition { text: &text, guide: None })).unwrap();
        let b = m.predict(&x, 5, Some(&Condition { text: &text, guide: Some(&masked) })).unwrap();
        assert_eq!(a, b);
        let active = GuideToken::active(masked.vectors.clone()).unwrap();
        let c = m.predict(&x, 5, Some(&Condition { text: &text, guide: Some(&active) })).unwrap();
        assert_ne!(a, c);
    }
}
