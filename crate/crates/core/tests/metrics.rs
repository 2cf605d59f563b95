//! Metric self-checks against closed forms and null models.

use diffnet::Tensor;
use kineta::evaluation::{diversity, fid, r_precision, R_PRECISION_BATCH};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn gaussian(n: usize, d: usize, mean: &[f64], rng: &mut ChaCha8Rng) -> Tensor {
    let data = (0..n * d)
        .map(|k| mean[k % d] + <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng))
        .collect();
    Tensor::new(&[n, d], data).unwrap()
}

#[test]
fn self_distance_is_zero() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = gaussian(400, 32, &[0.0; 32], &mut rng);
    assert!(fid(&a, &a).unwrap().abs() <= 1e-6);
}

#[test]
fn offset_gaussians_match_closed_form() {
    // Equal identity covariances: the trace term vanishes and the distance
    // is the squared mean offset.
    let d = 8;
    let offset: Vec<f64> = (0..d).map(|k| if k % 2 == 0 { 1.0 } else { -0.5 }).collect();
    let expected: f64 = offset.iter().map(|m| m * m).sum();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let a = gaussian(5000, d, &vec![0.0; d], &mut rng);
    let b = gaussian(5000, d, &offset, &mut rng);
    let got = fid(&a, &b).unwrap();
    assert!((got - expected).abs() <= 0.05 * expected, "fid {got} vs {expected}");
    assert!((fid(&b, &a).unwrap() - got).abs() <= 1e-6);
}

fn unit_rows(n: usize, d: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let mut t = gaussian(n, d, &vec![0.0; d], rng);
    for row in t.data_mut().chunks_mut(d) {
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        row.iter_mut().for_each(|v| *v /= norm);
    }
    t
}

#[test]
fn null_retrieval_is_chance() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let n = 32 * 32;
    let motion = unit_rows(n, 16, &mut rng);
    let text = unit_rows(n, 16, &mut rng);
    let top = r_precision(&motion, &text, R_PRECISION_BATCH).unwrap();
    for (k, p) in top.iter().enumerate() {
        let chance = (k + 1) as f64 / 32.0;
        assert!((p - chance).abs() <= 0.05, "top{} {p} vs {chance}", k + 1);
    }
    assert!(top[0] <= top[1] && top[1] <= top[2]);
}

#[test]
fn perfect_retrieval() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let f = unit_rows(64, 16, &mut rng);
    assert_eq!(r_precision(&f, &f, 32).unwrap(), [1.0, 1.0, 1.0]);
}

#[test]
fn antipodal_diversity() {
    // Half at +e, half at -e: a random distinct pair crosses with
    // probability n/(2(n-1)), and crossing pairs are 2 apart.
    let n = 200;
    let data: Vec<f64> = (0..n).flat_map(|i| [if i % 2 == 0 { 1.0 } else { -1.0 }, 0.0]).collect();
    let f = Tensor::new(&[n, 2], data).unwrap();
    let expected = 2.0 * n as f64 / (2.0 * (n as f64 - 1.0));
    let got = diversity(&f, 20000, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
    assert!((got - expected).abs() < 0.03, "{got} vs {expected}");
    let same = Tensor::new(&[10, 2], vec![0.3; 20]).unwrap();
    assert_eq!(diversity(&same, 50, &mut ChaCha8Rng::seed_from_u64(6)).unwrap(), 0.0);
}
