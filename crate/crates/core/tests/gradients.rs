//! Finite-difference checks of the differentiable pipeline pieces.

use kineta::gradcheck::{check_align_loss, check_extract_smooth, check_training_loss};

const TOL: f64 = 1e-4;

#[test]
fn smooth_phrases() {
    for (tau, seed) in [(1.0, 11), (0.5, 12)] {
        let c = check_extract_smooth(6, tau, 1e-4, seed).unwrap();
        assert!(c.rel_error <= TOL, "tau {tau}: {c:?}");
    }
}

#[test]
fn alignment_loss() {
    let r = check_align_loss(14, 10, 1e-5, 21).unwrap();
    assert!(r.passes(TOL), "{:?}", r.worst());
}

#[test]
fn micro_training_loss() {
    let r = check_training_loss(6, 1e-5, 31).unwrap();
    assert!(r.passes(TOL), "{:?}", r.worst());
}
