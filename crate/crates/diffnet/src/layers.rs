//! Standard layers built on [`Graph`] primitives.
//!
//! Layers own only [`ParamId`]s; values live in a [`ParamStore`] passed to
//! every forward call, so two models never share hidden state.

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Affine map `x W + b` with `W: [in, out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut R,
    ) -> Self {
        let std = (1.0 / in_dim as f64).sqrt();
        let weight = store.add_normal(format!("{name}.weight"), &[in_dim, out_dim], std, rng);
        let bias = Some(store.add_zeros(format!("{name}.bias"), &[out_dim]));
        Self {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    /// Same as [`Linear::new`] but with all weights zero; used for output
    /// heads that should start as the identity of a residual path.
    pub fn zeros(store: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize) -> Self {
        let weight = store.add_zeros(format!("{name}.weight"), &[in_dim, out_dim]);
        let bias = Some(store.add_zeros(format!("{name}.bias"), &[out_dim]));
        Self {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight);
        let y = g.matmul(x, w)?;
        match self.bias {
            Some(b) => {
                let b = g.param(store, b);
                g.add(y, b)
            }
            None => Ok(y),
        }
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        Self {
            gamma: store.add_full(format!("{name}.gamma"), &[dim], 1.0),
            beta: store.add_zeros(format!("{name}.beta"), &[dim]),
            eps: 1e-5,
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let gamma = g.param(store, self.gamma);
        let beta = g.param(store, self.beta);
        g.layer_norm(x, gamma, beta, self.eps)
    }
}

/// Lookup table of `count` vectors of width `dim`.
#[derive(Clone, Debug)]
pub struct Embedding {
    pub table: ParamId,
    pub count: usize,
    pub dim: usize,
}

impl Embedding {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        count: usize,
        dim: usize,
        std: f64,
        rng: &mut R,
    ) -> Self {
        Self {
            table: store.add_normal(format!("{name}.table"), &[count, dim], std, rng),
            count,
            dim,
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, ids: &[usize]) -> Result<Var> {
        let t = g.param(store, self.table);
        g.gather(t, ids)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Gelu,
    Relu,
    Silu,
    Tanh,
}

impl Activation {
    pub fn apply(self, g: &mut Graph, x: Var) -> Var {
        match self {
            Activation::Gelu => g.gelu(x),
            Activation::Relu => g.relu(x),
            Activation::Silu => g.silu(x),
            Activation::Tanh => g.tanh(x),
        }
    }
}

/// Two linear layers with an activation in between.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
    pub activation: Activation,
}

impl Mlp {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        hidden: usize,
        out_dim: usize,
        activation: Activation,
        rng: &mut R,
    ) -> Self {
        Self {
            fc1: Linear::new(store, &format!("{name}.fc1"), in_dim, hidden, rng),
            fc2: Linear::new(store, &format!("{name}.fc2"), hidden, out_dim, rng),
            activation,
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let h = self.fc1.forward(g, store, x)?;
        let h = self.activation.apply(g, h);
        self.fc2.forward(g, store, h)
    }
}

/// Multi-head attention with separate query/key/value/output projections.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        heads: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::InvalidArgument(format!(
                "{name}: width {dim} not divisible into {heads} heads"
            )));
        }
        Ok(Self {
            q: Linear::new(store, &format!("{name}.q"), dim, dim, rng),
            k: Linear::new(store, &format!("{name}.k"), dim, dim, rng),
            v: Linear::new(store, &format!("{name}.v"), dim, dim, rng),
            out: Linear::new(store, &format!("{name}.out"), dim, dim, rng),
            heads,
        })
    }

    /// `query` attends over `context` (self-attention when they coincide).
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        query: Var,
        context: Var,
        mask: Option<&Tensor>,
    ) -> Result<Var> {
        let q = self.q.forward(g, store, query)?;
        let k = self.k.forward(g, store, context)?;
        let v = self.v.forward(g, store, context)?;
        let a = g.attention(q, k, v, self.heads, mask)?;
        self.out.forward(g, store, a)
    }
}

/// Pre-norm transformer encoder block: self-attention then feed-forward.
#[derive(Clone, Debug)]
pub struct EncoderBlock {
    pub norm1: LayerNorm,
    pub attn: MultiHeadAttention,
    pub norm2: LayerNorm,
    pub ff: Mlp,
}

impl EncoderBlock {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        heads: usize,
        ff_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), dim),
            attn: MultiHeadAttention::new(store, &format!("{name}.attn"), dim, heads, rng)?,
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), dim),
            ff: Mlp::new(store, &format!("{name}.ff"), dim, ff_dim, dim, Activation::Gelu, rng),
        })
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: Var,
        mask: Option<&Tensor>,
    ) -> Result<Var> {
        let h = self.norm1.forward(g, store, x)?;
        let a = self.attn.forward(g, store, h, h, mask)?;
        let x = g.add(x, a)?;
        let h = self.norm2.forward(g, store, x)?;
        let f = self.ff.forward(g, store, h)?;
        g.add(x, f)
    }
}

/// Pre-norm transformer decoder block: self-attention, cross-attention over
/// a memory sequence, then feed-forward.
#[derive(Clone, Debug)]
pub struct DecoderBlock {
    pub norm1: LayerNorm,
    pub self_attn: MultiHeadAttention,
    pub norm2: LayerNorm,
    pub cross_attn: MultiHeadAttention,
    pub norm3: LayerNorm,
    pub ff: Mlp,
}

impl DecoderBlock {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        heads: usize,
        ff_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), dim),
            self_attn: MultiHeadAttention::new(store, &format!("{name}.self_attn"), dim, heads, rng)?,
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), dim),
            cross_attn: MultiHeadAttention::new(store, &format!("{name}.cross_attn"), dim, heads, rng)?,
            norm3: LayerNorm::new(store, &format!("{name}.norm3"), dim),
            ff: Mlp::new(store, &format!("{name}.ff"), dim, ff_dim, dim, Activation::Gelu, rng),
        })
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: Var,
        memory: Var,
        memory_mask: Option<&Tensor>,
    ) -> Result<Var> {
        let h = self.norm1.forward(g, store, x)?;
        let a = self.self_attn.forward(g, store, h, h, None)?;
        let x = g.add(x, a)?;
        let h = self.norm2.forward(g, store, x)?;
        let c = self.cross_attn.forward(g, store, h, memory, memory_mask)?;
        let x = g.add(x, c)?;
        let h = self.norm3.forward(g, store, x)?;
        let f = self.ff.forward(g, store, h)?;
        g.add(x, f)
    }
}

/// Sinusoidal encodings `[sin(p w_0), cos(p w_0), sin(p w_1), ...]` for real
/// positions, one row per position.
pub fn sinusoidal(positions: &[f64], dim: usize) -> Tensor {
    let half = dim / 2;
    let mut out = vec![0.0; positions.len() * dim];
    for (r, &p) in positions.iter().enumerate() {
        for i in 0..half {
            let freq = (-(10_000f64.ln()) * i as f64 / half.max(1) as f64).exp();
            out[r * dim + 2 * i] = (p * freq).sin();
            out[r * dim + 2 * i + 1] = (p * freq).cos();
        }
    }
    Tensor::matrix(positions.len(), dim, out).expect("sized above")
}

/// Additive key-padding mask: `[rows, keys]` with `-inf` where `valid[j]` is
/// false.
pub fn key_mask(rows: usize, valid: &[bool]) -> Tensor {
    let keys = valid.len();
    let mut data = vec![0.0; rows * keys];
    for r in 0..rows {
        for (j, &ok) in valid.iter().enumerate() {
            if !ok {
                data[r * keys + j] = f64::NEG_INFINITY;
            }
        }
    }
    Tensor::matrix(rows, keys, data).expect("sized above")
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn linear_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new("t");
        let lin = Linear::new(&mut store, "l", 4, 3, &mut rng);
        let mut g = Graph::new();
        let x = g.constant(Tensor::randn(&[5, 4], &mut rng));
        let y = lin.forward(&mut g, &store, x).unwrap();
        assert_eq!(g.shape(y), &[5, 3]);
    }

    #[test]
    fn sinusoidal_row_zero() {
        let t = sinusoidal(&[0.0], 6);
        assert_eq!(t.data(), &[0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
    }

    #[test]
    fn attention_rejects_bad_heads() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new("t");
        assert!(MultiHeadAttention::new(&mut store, "a", 6, 4, &mut rng).is_err());
    }

    #[test]
    fn masked_keys_get_zero_weight() {
        let mut g = Graph::new();
        let q = g.constant(Tensor::matrix(1, 2, vec![1.0, 0.0]).unwrap());
        let k = g.constant(Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let v = g.constant(Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let mask = key_mask(1, &[false, true]);
        let o = g.attention(q, k, v, 1, Some(&mask)).unwrap();
        assert_eq!(g.value(o).data(), &[3.0, 4.0]);
    }
}
