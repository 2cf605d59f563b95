//! Property tests over random motions and generated records.

use kineta::kp::{default_catalog, extract_hard};
use kineta::motion::{generate_dataset, read_motion_file, write_motion_file, GeneratorConfig, MotionSequence, Skeleton};
use proptest::prelude::*;

fn walk(frames: usize, seed: u64) -> MotionSequence {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut pos = vec![0.0f64; 15];
    let mut out = Vec::with_capacity(frames * 15);
    for _ in 0..frames {
        for p in pos.iter_mut() {
            *p += rng.random_range(-0.1..0.1);
        }
        out.extend(&pos);
    }
    MotionSequence::new(Skeleton::standard(), 20.0, out).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn file_round_trip(seed in any::<u64>()) {
        let r = generate_dataset(1, &GeneratorConfig::default(), &Skeleton::standard(), seed).unwrap().remove(0);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("r.kmo");
        write_motion_file(&r, &p).unwrap();
        prop_assert_eq!(read_motion_file(&p).unwrap(), r);
    }

    #[test]
    fn translation_leaves_phrases_unchanged(seed in any::<u64>(), dx in -3.0f64..3.0, dy in -3.0f64..3.0, dz in -1.0f64..1.0) {
        let m = walk(12, seed);
        let shifted: Vec<f64> = m.positions().chunks(3).flat_map(|p| [p[0] + dx, p[1] + dy, p[2] + dz]).collect();
        let s = MotionSequence::new(m.skeleton.clone(), m.fps, shifted).unwrap();
        let cat = default_catalog(&m.skeleton);
        let a = extract_hard(&m, &cat).unwrap();
        let b = extract_hard(&s, &cat).unwrap();
        prop_assert_eq!(a.values, b.values);
    }

    #[test]
    fn time_reversal_negates_velocities(seed in any::<u64>()) {
        let m = walk(10, seed);
        let t = m.n_frames();
        let reversed: Vec<f64> = (0..t).rev().flat_map(|f| m.frame(f).to_vec()).collect();
        let r = MotionSequence::new(m.skeleton.clone(), m.fps, reversed).unwrap();
        let cat = default_catalog(&m.skeleton);
        let a = extract_hard(&m, &cat).unwrap();
        let b = extract_hard(&r, &cat).unwrap();
        for (j, name) in cat.names().iter().enumerate() {
            for f in 0..t - 1 {
                if name.contains("rel_pos") {
                    prop_assert_eq!(b.values.at(f, j), a.values.at(t - 1 - f, j));
                } else {
                    // Forward difference at f in reverse is minus the one at t-2-f.
                    prop_assert_eq!(b.values.at(f, j), -a.values.at(t - 2 - f, j), "{}", name);
                }
            }
        }
    }
}
