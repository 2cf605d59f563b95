//! Procedural rendering of motion scripts.
//!
//! Every command is posed from its own canonical start state: the root keeps
//! the ground position reached by the previous command, but heading, height
//! and limb offsets restart from the command's profile. The first frames of
//! each later command are blended linearly from the previous command's last
//! frame, and a small per-joint jitter (a static offset plus a slow sway) is
//! added on top.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::motion::{DatasetRecord, MotionScript, MotionSequence, Skeleton, Verb, DEFAULT_FPS};

/// Upper bound on the distance between a jittered joint and its clean pose.
pub const JITTER_BOUND: f64 = 0.02;

const WALK_SPEED: f64 = 1.0;
const WALK_BACK_SPEED: f64 = 0.8;
const RUN_SPEED: f64 = 2.5;
const RUN_HAND_LIFT: f64 = 0.35;
const TURN_RATE: f64 = 1.2;
const TURN_MAX: f64 = 2.0 * PI / 3.0;
const SQUAT_DEPTH: f64 = 0.35;
const SQUAT_MAX: f64 = 0.5;
const RAISE_PER_MAGNITUDE: f64 = 0.8 / 1.5;
const WAVE_LIFT: f64 = 0.75;
const WAVE_AMPLITUDE: f64 = 0.12;
const WAVE_HZ: f64 = 1.5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RenderConfig {
    pub fps: f64,
    /// Radius bound of the static per-joint offset (m).
    pub jitter_offset: f64,
    /// Per-axis amplitude bound of the slow sway (m).
    pub jitter_sway: f64,
    pub max_blend: usize,
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self {
            fps: DEFAULT_FPS,
            jitter_offset: 0.015,
            jitter_sway: 0.0025,
            max_blend: 5,
        }
    }
}

impl RenderConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.fps > 0.0 && self.fps.is_finite()) {
            return Err(Error::validation("render.fps must be positive"));
        }
        if self.jitter_offset < 0.0 || self.jitter_sway < 0.0 {
            return Err(Error::validation("jitter amplitudes must be non-negative"));
        }
        if self.jitter_offset + 3f64.sqrt() * self.jitter_sway > JITTER_BOUND + 1e-12 {
            return Err(Error::validation(format!(
                "jitter settings exceed the {JITTER_BOUND} m bound"
            )));
        }
        Ok(())
    }
}

/// Number of leading frames of a command blended from the previous one.
pub fn blend_frames(duration: usize, max_blend: usize) -> usize {
    max_blend.min(duration / 4)
}

struct Roles {
    left_hand: Option<usize>,
    right_hand: Option<usize>,
    feet: Option<usize>,
}

struct Pose {
    root: [f64; 3],
    yaw: f64,
    offsets: Vec<[f64; 3]>,
}

impl Pose {
    fn world(&self) -> Vec<[f64; 3]> {
        let (s, c) = self.yaw.sin_cos();
        self.offsets
            .iter()
            .map(|o| {
                [
                    self.root[0] + c * o[0] - s * o[1],
                    self.root[1] + s * o[0] + c * o[1],
                    self.root[2] + o[2],
                ]
            })
            .collect()
    }
}

fn ground_speed(verb: Verb, magnitude: f64) -> f64 {
    match verb {
        Verb::WalkForward => WALK_SPEED * magnitude,
        Verb::WalkBackward => -WALK_BACK_SPEED * magnitude,
        Verb::RunForward => RUN_SPEED * magnitude,
        Verb::RunBackward => -RUN_SPEED * magnitude,
        _ => 0.0,
    }
}

fn command_pose(
    verb: Verb,
    duration: usize,
    magnitude: f64,
    k: usize,
    start_xy: [f64; 2],
    rest: &[[f64; 3]],
    roles: &Roles,
    height: f64,
    fps: f64,
) -> Pose {
    let m = magnitude;
    let u = if duration > 1 {
        k as f64 / (duration - 1) as f64
    } else {
        0.0
    };
    let time = k as f64 / fps;
    let mut root = [start_xy[0], start_xy[1] + ground_speed(verb, m) * time, height];
    let mut yaw = 0.0;
    let mut offsets = rest.to_vec();
    let mut lift = |joint: Option<usize>, dz: f64| {
        if let Some(j) = joint {
            offsets[j][2] += dz;
        }
    };
    match verb {
        Verb::RunForward | Verb::RunBackward => {
            lift(roles.left_hand, RUN_HAND_LIFT);
            lift(roles.right_hand, RUN_HAND_LIFT);
        }
        Verb::TurnLeft | Verb::TurnRight => {
            let sweep = (TURN_RATE * m * duration as f64 / fps).min(TURN_MAX);
            let dir = if verb == Verb::TurnLeft { 1.0 } else { -1.0 };
            yaw = dir * sweep * (u - 0.5);
        }
        Verb::Squat | Verb::StandUp => {
            let depth = (SQUAT_DEPTH * m).min(SQUAT_MAX);
            let down = if verb == Verb::Squat { u } else { 1.0 - u };
            root[2] = height - depth * down;
            // Feet stay planted, so they rise relative to the root.
            lift(roles.feet, depth * down);
        }
        Verb::RaiseLeftHand => lift(roles.left_hand, RAISE_PER_MAGNITUDE * m * u),
        Verb::RaiseRightHand => lift(roles.right_hand, RAISE_PER_MAGNITUDE * m * u),
        Verb::LowerLeftHand => lift(roles.left_hand, RAISE_PER_MAGNITUDE * m * (1.0 - u)),
        Verb::LowerRightHand => lift(roles.right_hand, RAISE_PER_MAGNITUDE * m * (1.0 - u)),
        Verb::Wave => {
            lift(roles.right_hand, WAVE_LIFT);
            if let Some(j) = roles.right_hand {
                offsets[j][0] += WAVE_AMPLITUDE * m * (2.0 * PI * WAVE_HZ * time).sin();
            }
        }
        Verb::WalkForward | Verb::WalkBackward | Verb::Idle => {}
    }
    Pose { root, yaw, offsets }
}

pub fn render_script(script: &MotionScript, skeleton: &Skeleton, seed: u64) -> Result<DatasetRecord> {
    render_script_with(script, skeleton, seed, &RenderConfig::default())
}

pub fn render_script_with(
    script: &MotionScript,
    skeleton: &Skeleton,
    seed: u64,
    config: &RenderConfig,
) -> Result<DatasetRecord> {
    script.validate()?;
    skeleton.validate()?;
    config.validate()?;
    for c in &script.commands {
        if let Some(j) = c.verb.required_joints().iter().find(|j| skeleton.index_of(j).is_none()) {
            return Err(Error::validation(format!(
                "verb {} needs joint `{j}` which the skeleton lacks",
                c.verb
            )));
        }
    }
    let roles = Roles {
        left_hand: skeleton.index_of("left_hand"),
        right_hand: skeleton.index_of("right_hand"),
        feet: skeleton.index_of("feet_center"),
    };
    let rest = skeleton.rest_offsets();
    let height = skeleton.root_height();
    let n_j = skeleton.n_joints();
    let fps = config.fps;

    let mut clean: Vec<Vec<[f64; 3]>> = Vec::with_capacity(script.total_frames());
    let mut xy = [0.0, 0.0];
    for (ci, c) in script.commands.iter().enumerate() {
        let blend = if ci == 0 {
            0
        } else {
            blend_frames(c.duration, config.max_blend)
        };
        let prev = clean.last().cloned();
        for k in 0..c.duration {
            let pose = command_pose(c.verb, c.duration, c.magnitude, k, xy, &rest, &roles, height, fps);
            let mut world = pose.world();
            if let (Some(prev), true) = (&prev, k < blend) {
                let a = (k + 1) as f64 / (blend + 1) as f64;
                for (w, p) in world.iter_mut().zip(prev) {
                    for ax in 0..3 {
                        w[ax] = (1.0 - a) * p[ax] + a * w[ax];
                    }
                }
            }
            clean.push(world);
        }
        xy[1] += ground_speed(c.verb, c.magnitude) * c.duration as f64 / fps;
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let jitter: Vec<([f64; 3], [f64; 3], [f64; 3], [f64; 3])> = (0..n_j)
        .map(|_| {
            let mut dir = [0.0f64; 3];
            for d in dir.iter_mut() {
                *d = rng.random_range(-1.0..1.0);
            }
            let norm = (dir[0] * dir[0] + dir[1] * dir[1] + dir[2] * dir[2]).sqrt().max(1e-12);
            let radius = rng.random_range(0.0..=1.0) * config.jitter_offset;
            let fixed = [dir[0] / norm * radius, dir[1] / norm * radius, dir[2] / norm * radius];
            let mut amp = [0.0; 3];
            let mut freq = [0.0; 3];
            let mut phase = [0.0; 3];
            for ax in 0..3 {
                amp[ax] = rng.random_range(0.0..=1.0) * config.jitter_sway;
                freq[ax] = rng.random_range(0.3..0.6);
                phase[ax] = rng.random_range(0.0..2.0 * PI);
            }
            (fixed, amp, freq, phase)
        })
        .collect();

    let mut positions = Vec::with_capacity(clean.len() * n_j * 3);
    for (t, frame) in clean.iter().enumerate() {
        let time = t as f64 / fps;
        for (j, p) in frame.iter().enumerate() {
            let (fixed, amp, freq, phase) = &jitter[j];
            for ax in 0..3 {
                let sway = amp[ax] * (2.0 * PI * freq[ax] * time + phase[ax]).sin();
                positions.push((p[ax] + fixed[ax] + sway) as f32 as f64);
            }
        }
    }

    let motion = MotionSequence::new(skeleton.clone(), fps, positions)?;
    let record = DatasetRecord {
        motion,
        script: script.clone(),
        full_text: crate::text::full_text(script),
        segment_bounds: script.segment_bounds(),
        seed,
    };
    record.validate()?;
    Ok(record)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::motion::{Command, ROOT};

    fn one(verb: Verb, d: usize, m: f64) -> MotionScript {
        MotionScript::new(vec![Command::new(verb, d, m)]).unwrap()
    }

    #[test]
    fn idle_stays_within_jitter() {
        let r = render_script(&one(Verb::Idle, 10, 0.0), &Skeleton::standard(), 3).unwrap();
        assert_eq!(r.motion.n_frames(), 10);
        assert_eq!(r.segment_bounds, vec![(0, 10)]);
        assert!(r.motion.max_step() <= JITTER_BOUND);
    }

    #[test]
    fn deterministic_per_seed() {
        let s = one(Verb::WalkForward, 20, 1.0);
        let a = render_script(&s, &Skeleton::standard(), 7).unwrap();
        let b = render_script(&s, &Skeleton::standard(), 7).unwrap();
        assert_eq!(a, b);
        let c = render_script(&s, &Skeleton::standard(), 8).unwrap();
        assert_ne!(a.motion, c.motion);
    }

    #[test]
    fn raised_left_hand_climbs_monotonically() {
        let r = render_script(&one(Verb::RaiseLeftHand, 16, 1.0), &Skeleton::standard(), 11).unwrap();
        let lh = Skeleton::standard().index_of("left_hand").unwrap();
        for t in 1..16 {
            assert!(r.motion.joint(t, lh)[2] > r.motion.joint(t - 1, lh)[2], "frame {t}");
        }
    }

    #[test]
    fn feet_stay_planted_during_squat() {
        let sk = Skeleton::standard();
        let r = render_script(&one(Verb::Squat, 30, 1.5), &sk, 2).unwrap();
        let feet = sk.index_of("feet_center").unwrap();
        for t in 0..30 {
            assert!(r.motion.joint(t, feet)[2].abs() <= JITTER_BOUND);
        }
        assert!(r.motion.joint(29, ROOT)[2] < r.motion.joint(0, ROOT)[2] - 0.4);
    }

    #[test]
    fn rejects_verbs_missing_joints() {
        let sk = Skeleton::new(vec!["root".into(), "head".into()], vec![0, 0], vec![0.95, 0.6]).unwrap();
        assert!(render_script(&one(Verb::Wave, 10, 1.0), &sk, 0).is_err());
        assert!(render_script(&one(Verb::WalkForward, 10, 1.0), &sk, 0).is_ok());
    }

    #[test]
    fn jitter_bound_is_enforced() {
        let cfg = RenderConfig {
            jitter_offset: 0.05,
            ..RenderConfig::default()
        };
        assert!(render_script_with(&one(Verb::Idle, 4, 0.0), &Skeleton::standard(), 0, &cfg).is_err());
    }
}
