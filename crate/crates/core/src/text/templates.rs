use crate::motion::{MotionScript, Verb};
use crate::text::{DecomposedPrompt, Source};

pub fn template(verb: Verb) -> &'static str {
    match verb {
        Verb::WalkForward => "a person walks forward",
        Verb::WalkBackward => "a person walks backward",
        Verb::RunForward => "a person runs forward",
        Verb::RunBackward => "a person runs backward",
        Verb::TurnLeft => "a person turns left",
        Verb::TurnRight => "a person turns right",
        Verb::Squat => "a person squats",
        Verb::StandUp => "a person stands up",
        Verb::RaiseLeftHand => "a person raises the left hand",
        Verb::RaiseRightHand => "a person raises the right hand",
        Verb::LowerLeftHand => "a person lowers the left hand",
        Verb::LowerRightHand => "a person lowers the right hand",
        Verb::Wave => "a person waves",
        Verb::Idle => "a person stands still",
    }
}

/// One sentence covering the whole script: the templates joined by ", then ".
pub fn full_text(script: &MotionScript) -> String {
    script
        .commands
        .iter()
        .map(|c| template(c.verb))
        .collect::<Vec<_>>()
        .join(", then ")
}

pub fn script_to_ground_truth(script: &MotionScript) -> DecomposedPrompt {
    DecomposedPrompt {
        full_text: full_text(script),
        parts: script.commands.iter().map(|c| template(c.verb).to_string()).collect(),
        source: Source::GroundTruth,
    }
}
