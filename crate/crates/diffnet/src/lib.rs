//! Minimal differentiable-computation core.
//!
//! Values are computed in 64-bit floats on a single-use [`Graph`]; trainable
//! arrays live in a [`ParamStore`] and are kept at 32-bit precision by the
//! optimizer and the [`Checkpoint`] container. Matrix products go through
//! `matrixmultiply`.

mod error;
mod gemm;
mod graph;
mod params;
mod tensor;

pub mod checkpoint;
pub mod gradcheck;
pub mod layers;
pub mod optim;

pub use checkpoint::Checkpoint;
pub use error::{Error, Result};
pub use graph::{Gradients, Graph, Var};
pub use layers::{
    key_mask, sinusoidal, Activation, DecoderBlock, Embedding, EncoderBlock, LayerNorm, Linear,
    Mlp, MultiHeadAttention,
};
pub use optim::{Adam, AdamConfig};
pub use params::{GradBuffer, Param, ParamId, ParamStore};
pub use tensor::Tensor;

/// Numerically stable logistic function.
pub fn sigmoid(x: f64) -> f64 {
    graph::sigmoid(x)
}

/// Numerically stable `ln(1 + e^x)`.
pub fn softplus(x: f64) -> f64 {
    graph::softplus(x)
}
