use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::motion::Skeleton;

pub const MAX_COMMANDS: usize = 20;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verb {
    WalkForward,
    WalkBackward,
    RunForward,
    RunBackward,
    TurnLeft,
    TurnRight,
    Squat,
    StandUp,
    RaiseLeftHand,
    RaiseRightHand,
    LowerLeftHand,
    LowerRightHand,
    Wave,
    Idle,
}

impl Verb {
    pub const ALL: [Verb; 14] = [
        Verb::WalkForward,
        Verb::WalkBackward,
        Verb::RunForward,
        Verb::RunBackward,
        Verb::TurnLeft,
        Verb::TurnRight,
        Verb::Squat,
        Verb::StandUp,
        Verb::RaiseLeftHand,
        Verb::RaiseRightHand,
        Verb::LowerLeftHand,
        Verb::LowerRightHand,
        Verb::Wave,
        Verb::Idle,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Verb::WalkForward => "walk_forward",
            Verb::WalkBackward => "walk_backward",
            Verb::RunForward => "run_forward",
            Verb::RunBackward => "run_backward",
            Verb::TurnLeft => "turn_left",
            Verb::TurnRight => "turn_right",
            Verb::Squat => "squat",
            Verb::StandUp => "stand_up",
            Verb::RaiseLeftHand => "raise_left_hand",
            Verb::RaiseRightHand => "raise_right_hand",
            Verb::LowerLeftHand => "lower_left_hand",
            Verb::LowerRightHand => "lower_right_hand",
            Verb::Wave => "wave",
            Verb::Idle => "idle",
        }
    }

    /// Joint names this verb cannot be rendered without.
    pub fn required_joints(self) -> &'static [&'static str] {
        match self {
            Verb::RaiseLeftHand | Verb::LowerLeftHand => &["left_hand"],
            Verb::RaiseRightHand | Verb::LowerRightHand | Verb::Wave => &["right_hand"],
            _ => &[],
        }
    }

    pub fn supported_by(self, skeleton: &Skeleton) -> bool {
        self.required_joints()
            .iter()
            .all(|j| skeleton.index_of(j).is_some())
    }
}

impl fmt::Display for Verb {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Verb {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Verb::ALL
            .iter()
            .copied()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::validation(format!("unknown verb `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Command {
    pub verb: Verb,
    pub duration: usize,
    pub magnitude: f64,
}

impl Command {
    pub fn new(verb: Verb, duration: usize, magnitude: f64) -> Self {
        Self {
            verb,
            duration,
            magnitude,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MotionScript {
    pub commands: Vec<Command>,
}

impl MotionScript {
    pub fn new(commands: Vec<Command>) -> Result<Self> {
        let s = Self { commands };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.commands.len();
        if n == 0 || n > MAX_COMMANDS {
            return Err(Error::validation(format!(
                "script must have 1..={MAX_COMMANDS} commands, got {n}"
            )));
        }
        for (i, c) in self.commands.iter().enumerate() {
            if c.duration == 0 {
                return Err(Error::validation(format!("command {i} ({}) has zero duration", c.verb)));
            }
            if !c.magnitude.is_finite() || c.magnitude < 0.0 {
                return Err(Error::validation(format!(
                    "command {i} ({}) has invalid magnitude {}",
                    c.verb, c.magnitude
                )));
            }
            if c.verb != Verb::Idle && c.magnitude == 0.0 {
                return Err(Error::validation(format!(
                    "command {i} ({}) needs a positive magnitude",
                    c.verb
                )));
            }
        }
        if self.total_frames() < 2 {
            return Err(Error::validation("script must span at least 2 frames"));
        }
        Ok(())
    }

    pub fn total_frames(&self) -> usize {
        self.commands.iter().map(|c| c.duration).sum()
    }

    /// `[start, end)` frame range of every command.
    pub fn segment_bounds(&self) -> Vec<(usize, usize)> {
        let mut start = 0;
        self.commands
            .iter()
            .map(|c| {
                let b = (start, start + c.duration);
                start += c.duration;
                b
            })
            .collect()
    }
}
