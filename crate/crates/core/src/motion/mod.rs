//! Skeletons, motion sequences, the procedural script renderer and the
//! on-disk motion format.

mod dataset;
mod io;
mod render;
mod script;
mod skeleton;

use diffnet::Tensor;

pub use dataset::{
    generate_dataset, read_dataset, read_manifest, sample_script, write_dataset, GeneratorConfig, Manifest,
    ManifestEntry, MANIFEST_FILE,
};
pub use io::{
    decode_motion, decode_motion_sequence, encode_generated, encode_motion, read_motion_file, read_motion_sequence,
    write_generated_motion, write_motion_file, FORMAT_TAG,
};
pub use render::{blend_frames, render_script, render_script_with, RenderConfig, JITTER_BOUND};
pub use script::{Command, MotionScript, Verb, MAX_COMMANDS};
pub use skeleton::{Skeleton, ROOT};

use crate::error::{Error, Result};

pub const DEFAULT_FPS: f64 = 20.0;
pub const DEFAULT_V_MAX: f64 = 10.0;

/// Joint positions over time, row-major `[frame][joint][xyz]`, meters, z-up.
#[derive(Clone, Debug, PartialEq)]
pub struct MotionSequence {
    pub skeleton: Skeleton,
    pub fps: f64,
    n_frames: usize,
    positions: Vec<f64>,
}

impl MotionSequence {
    pub fn new(skeleton: Skeleton, fps: f64, positions: Vec<f64>) -> Result<Self> {
        skeleton.validate()?;
        if !(fps > 0.0 && fps.is_finite()) {
            return Err(Error::validation(format!("fps must be positive, got {fps}")));
        }
        let width = skeleton.n_joints() * 3;
        if positions.len() % width != 0 {
            return Err(Error::validation(format!(
                "{} values do not divide into frames of {width}",
                positions.len()
            )));
        }
        let n_frames = positions.len() / width;
        if n_frames < 2 {
            return Err(Error::validation(format!("motion needs at least 2 frames, got {n_frames}")));
        }
        if positions.iter().any(|v| !v.is_finite()) {
            return Err(Error::validation("non-finite position"));
        }
        Ok(Self {
            skeleton,
            fps,
            n_frames,
            positions,
        })
    }

    /// Builds a sequence from a `[frames, joints * 3]` tensor.
    pub fn from_tensor(skeleton: Skeleton, fps: f64, t: &Tensor) -> Result<Self> {
        if t.cols() != skeleton.n_joints() * 3 {
            return Err(Error::validation(format!(
                "tensor width {} does not match {} joints",
                t.cols(),
                skeleton.n_joints()
            )));
        }
        Self::new(skeleton, fps, t.data().to_vec())
    }

    pub fn n_frames(&self) -> usize {
        self.n_frames
    }

    pub fn n_joints(&self) -> usize {
        self.skeleton.n_joints()
    }

    pub fn positions(&self) -> &[f64] {
        &self.positions
    }

    pub fn frame(&self, t: usize) -> &[f64] {
        let w = self.n_joints() * 3;
        &self.positions[t * w..(t + 1) * w]
    }

    pub fn joint(&self, t: usize, j: usize) -> [f64; 3] {
        let f = self.frame(t);
        [f[3 * j], f[3 * j + 1], f[3 * j + 2]]
    }

    /// `[frames, joints * 3]` view used by the networks.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::matrix(self.n_frames, self.n_joints() * 3, self.positions.clone())
            .expect("sized at construction")
    }

    /// Largest displacement of any joint between consecutive frames.
    pub fn max_step(&self) -> f64 {
        let mut best: f64 = 0.0;
        for t in 1..self.n_frames {
            for j in 0..self.n_joints() {
                let (a, b) = (self.joint(t - 1, j), self.joint(t, j));
                let d = ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt();
                best = best.max(d);
            }
        }
        best
    }

    /// Checks the per-frame speed limit used for generated data.
    pub fn check_speed(&self, v_max: f64) -> Result<()> {
        let step = self.max_step();
        if step > v_max / self.fps + 1e-9 {
            return Err(Error::validation(format!(
                "joint displacement {step:.4} m/frame exceeds v_max {v_max} m/s at {} fps",
                self.fps
            )));
        }
        Ok(())
    }
}

/// A rendered motion with its script, a one-sentence description and the
/// frame range realized by each command.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetRecord {
    pub motion: MotionSequence,
    pub script: MotionScript,
    pub full_text: String,
    pub segment_bounds: Vec<(usize, usize)>,
    pub seed: u64,
}

impl DatasetRecord {
    pub fn validate(&self) -> Result<()> {
        self.script.validate()?;
        if self.segment_bounds.len() != self.script.commands.len() {
            return Err(Error::validation(format!(
                "segment bounds: {} ranges for {} commands",
                self.segment_bounds.len(),
                self.script.commands.len()
            )));
        }
        let mut expect = 0;
        for &(s, e) in &self.segment_bounds {
            if s != expect || e <= s {
                return Err(Error::validation("segment bounds must be contiguous, ordered and non-empty"));
            }
            expect = e;
        }
        if expect != self.motion.n_frames() {
            return Err(Error::validation(format!(
                "segment bounds cover {expect} frames but motion has {}",
                self.motion.n_frames()
            )));
        }
        Ok(())
    }
}

