//! Closed-form pieces recomputed independently: feasible windows, the
//! forward-noising identity, guidance combination and the final reverse step.

use diffnet::Tensor;
use kineta::alignment::{feasible_window, feasible_windows};
use kineta::diffusion::{cfg_combine, p_step, q_sample, DiffusionSchedule, ScheduleKind};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Window bounds written out directly, with the natural log.
fn window_bounds(i: usize, n: usize, t_len: usize) -> (f64, f64) {
    let (i, n, t) = (i as f64, n as f64, t_len as f64);
    let k = 1.0 / (n + 2.0).ln();
    let left = i / (n - 1.0) * t / n * (n - 1.0 - k);
    (left, left + t / n * (1.0 + k))
}

#[test]
fn windows_tile_the_sequence_with_overlap() {
    for n in 2..=20 {
        for t_len in [20, 50, 100, 400] {
            let ws = feasible_windows(n, t_len).unwrap();
            assert!(ws[0].l.abs() <= 1e-9, "n={n} T={t_len}: l0={}", ws[0].l);
            assert!((ws[n - 1].r - t_len as f64).abs() <= 1e-9, "n={n} T={t_len}: r={}", ws[n - 1].r);
            for (i, w) in ws.iter().enumerate() {
                let (l, r) = window_bounds(i, n, t_len);
                assert!((w.l - l).abs() <= 1e-9 && (w.r - r).abs() <= 1e-9);
                assert!(0.0 <= w.l && w.l < w.r && w.r <= t_len as f64 + 1e-9);
            }
            for pair in ws.windows(2) {
                assert!(pair[0].l < pair[1].l && pair[0].r < pair[1].r, "windows out of order");
                assert!(pair[1].l < pair[0].r, "n={n} T={t_len}: consecutive windows do not overlap");
            }
        }
    }
}

#[test]
fn four_part_first_window() {
    let w = feasible_window(0, 4, 80).unwrap();
    assert!((w.r - 20.0 * (1.0 + 1.0 / 6f64.ln())).abs() < 1e-12);
    assert!((w.r - 31.16).abs() < 0.01);
    let whole = feasible_window(0, 1, 30).unwrap();
    assert_eq!((whole.l, whole.r), (0.0, 30.0));
}

fn randn(shape: &[usize], seed: u64) -> Tensor {
    Tensor::randn(shape, &mut ChaCha8Rng::seed_from_u64(seed))
}

#[test]
fn forward_noising_inverts() {
    for kind in [ScheduleKind::Linear, ScheduleKind::Cosine] {
        let s = DiffusionSchedule::new(100, kind).unwrap();
        let x0 = randn(&[12, 15], 1);
        let eps = randn(&[12, 15], 2);
        for t in [1, 2, 50, 99, 100] {
            let xt = q_sample(&x0, t, &eps, &s).unwrap();
            let ab = s.alpha_bar(t);
            for ((&x, &e), &orig) in xt.data().iter().zip(eps.data()).zip(x0.data()) {
                let back = (x - (1.0 - ab).sqrt() * e) / ab.sqrt();
                assert!((back - orig).abs() <= 1e-6, "t={t}: {back} vs {orig}");
            }
        }
    }
}

#[test]
fn schedule_products() {
    let s = DiffusionSchedule::from_betas(ScheduleKind::Linear, vec![0.1, 0.1, 0.1]).unwrap();
    assert!((s.alpha_bar(3) - 0.729).abs() < 1e-12);
    let l = DiffusionSchedule::new(1000, ScheduleKind::Linear).unwrap();
    assert!((l.beta(1) - 1e-4).abs() < 1e-15 && (l.beta(1000) - 0.02).abs() < 1e-15);
    assert!(l.alpha_bar(1000) < l.alpha_bar(1));
}

#[test]
fn guidance_identities_are_exact() {
    let c = randn(&[6, 4], 3);
    let u = randn(&[6, 4], 4);
    assert_eq!(cfg_combine(&c, &u, 0.0).unwrap(), c);
    let w1 = cfg_combine(&c, &u, 1.0).unwrap();
    // Computed as c + (c - u): equal to 2c - u up to one rounding each.
    for ((&g, &a), &b) in w1.data().iter().zip(c.data()).zip(u.data()) {
        assert!((g - (2.0 * a - b)).abs() <= 4.0 * f64::EPSILON * (a.abs() + b.abs()));
    }
    for w in [-0.5, 0.0, 1.5, 7.0] {
        assert_eq!(cfg_combine(&c, &c, w).unwrap(), c);
    }
}

#[test]
fn last_reverse_step_is_the_posterior_mean() {
    let s = DiffusionSchedule::new(50, ScheduleKind::Linear).unwrap();
    let xt = randn(&[5, 3], 5);
    let x0 = randn(&[5, 3], 6);
    let a = p_step(&xt, &x0, 1, &s, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    let b = p_step(&xt, &x0, 1, &s, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
    assert_eq!(a, b);
    // With alpha_bar(0) = 1 the x_t coefficient vanishes and the x0
    // coefficient is beta_1 / (1 - alpha_bar_1) = 1.
    let (beta, ab) = (s.beta(1), s.alpha_bar(1));
    for (&got, &x0v) in a.data().iter().zip(x0.data()) {
        let mean = beta / (1.0 - ab) * x0v;
        assert!((got - mean).abs() < 1e-12, "{got} vs {mean}");
    }
}
