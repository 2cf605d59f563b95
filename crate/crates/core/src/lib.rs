//! Text-to-motion diffusion with kinematic-phrase alignment on a synthetic
//! skeletal corpus.

pub mod alignment;
pub mod diffusion;
pub mod error;
pub mod evaluation;
pub mod gradcheck;
pub mod kp;
pub mod motion;
pub mod text;

pub use error::{Error, Result};
