//! Rendered scripts checked against hand-written per-verb phrase signatures.

use kineta::kp::{default_catalog, extract_hard, extract_raw, extract_smooth, KpCatalog};
use kineta::motion::{blend_frames, generate_dataset, GeneratorConfig, RenderConfig, Skeleton, Verb};

/// Phrases whose sign is fixed for the whole interior of a verb's segment on
/// the standard skeleton (left hand at -x, right hand at +x, z up, facing +y).
fn signature(verb: Verb) -> Vec<(&'static str, f64)> {
    use Verb::*;
    match verb {
        WalkForward => vec![("root.vel.y", 1.0)],
        WalkBackward => vec![("root.vel.y", -1.0)],
        RunForward => vec![("root.vel.y", 1.0), ("left_hand.rel_pos.z", 1.0), ("right_hand.rel_pos.z", 1.0)],
        RunBackward => vec![("root.vel.y", -1.0), ("left_hand.rel_pos.z", 1.0), ("right_hand.rel_pos.z", 1.0)],
        // Counter-clockwise yaw swings the left hand toward -y, the right toward +y.
        TurnLeft => vec![("left_hand.rel_vel.y", -1.0), ("right_hand.rel_vel.y", 1.0), ("root.vel.y", 0.0)],
        TurnRight => vec![("left_hand.rel_vel.y", 1.0), ("right_hand.rel_vel.y", -1.0), ("root.vel.y", 0.0)],
        Squat => vec![("root.vel.z", -1.0), ("feet_center.rel_vel.z", 1.0)],
        StandUp => vec![("root.vel.z", 1.0), ("feet_center.rel_vel.z", -1.0)],
        RaiseLeftHand => vec![("left_hand.rel_vel.z", 1.0)],
        RaiseRightHand => vec![("right_hand.rel_vel.z", 1.0)],
        LowerLeftHand => vec![("left_hand.rel_vel.z", -1.0)],
        LowerRightHand => vec![("right_hand.rel_vel.z", -1.0)],
        Wave => vec![("right_hand.rel_pos.z", 1.0), ("root.vel.y", 0.0)],
        Idle => vec![
            ("root.vel.x", 0.0),
            ("root.vel.y", 0.0),
            ("root.vel.z", 0.0),
            ("left_hand.rel_vel.z", 0.0),
            ("right_hand.rel_vel.z", 0.0),
        ],
    }
}

fn column(catalog: &KpCatalog, name: &str) -> usize {
    catalog.index_of(name).unwrap_or_else(|| panic!("catalog lacks `{name}`"))
}

#[test]
fn rendered_segments_match_verb_signatures() {
    let sk = Skeleton::standard();
    let catalog = default_catalog(&sk);
    let records = generate_dataset(200, &GeneratorConfig::default(), &sk, 17).unwrap();
    let max_blend = RenderConfig::default().max_blend;
    let (mut hits, mut total) = (0usize, 0usize);
    let mut per_verb = std::collections::BTreeMap::<String, (usize, usize)>::new();
    for r in &records {
        let kp = extract_hard(&r.motion, &catalog).unwrap();
        for (ci, (c, &(start, end))) in r.script.commands.iter().zip(&r.segment_bounds).enumerate() {
            let blend = if ci == 0 { 0 } else { blend_frames(c.duration, max_blend) };
            // Skip the blend-in and the last frame, whose forward difference
            // reaches into the next segment.
            let sig: Vec<(usize, f64)> = signature(c.verb).into_iter().map(|(n, s)| (column(&catalog, n), s)).collect();
            let entry = per_verb.entry(c.verb.to_string()).or_default();
            for t in (start + blend.max(1))..end.saturating_sub(1) {
                let ok = sig.iter().all(|&(j, s)| kp.values.at(t, j) == s);
                hits += ok as usize;
                total += 1;
                entry.0 += ok as usize;
                entry.1 += 1;
            }
        }
    }
    assert!(total > 5000, "too few interior frames: {total}");
    let rate = hits as f64 / total as f64;
    for (verb, (h, n)) in &per_verb {
        println!("{verb:>18}: {:.3} of {n}", *h as f64 / *n as f64);
    }
    assert!(rate >= 0.95, "signature agreement {rate:.4} over {total} frames");
}

#[test]
fn smooth_signs_agree_with_hard_at_low_temperature() {
    let sk = Skeleton::standard();
    let catalog = default_catalog(&sk);
    let records = generate_dataset(40, &GeneratorConfig::default(), &sk, 5).unwrap();
    let mut checked = 0;
    for r in &records {
        let raw = extract_raw(&r.motion, &catalog).unwrap();
        let hard = extract_hard(&r.motion, &catalog).unwrap();
        let smooth = extract_smooth(&r.motion, &catalog, 0.01).unwrap();
        for ((&v, &h), &s) in raw.data().iter().zip(hard.values.data()).zip(smooth.values.data()) {
            if v.abs() > 0.05 {
                let sign = if s > 0.0 { 1.0 } else { -1.0 };
                assert_eq!(sign, h, "raw {v}, smooth {s}");
                checked += 1;
            }
        }
    }
    assert!(checked > 1000);
}
