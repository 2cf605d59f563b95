use diffnet::Tensor;
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;

use crate::error::{Error, Result};

/// Negative eigenvalues are clamped to zero; below `-EIGEN_CLAMP` a warning
/// is logged since round-off alone should not get there.
pub const EIGEN_CLAMP: f64 = 1e-8;

pub const R_PRECISION_BATCH: usize = 32;

fn as_matrix(features: &Tensor) -> DMatrix<f64> {
    DMatrix::from_row_slice(features.rows(), features.cols(), features.data())
}

fn mean_and_cov(x: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let n = x.nrows() as f64;
    let mean = x.row_mean().transpose();
    let mut centered = x.clone();
    for mut row in centered.row_iter_mut() {
        row -= mean.transpose();
    }
    let cov = centered.transpose() * &centered / (n - 1.0);
    (mean, cov)
}

fn clamped_eigen(m: &DMatrix<f64>) -> SymmetricEigen<f64, nalgebra::Dyn> {
    let sym = (m + m.transpose()) * 0.5;
    let mut eig = SymmetricEigen::new(sym);
    for v in eig.eigenvalues.iter_mut() {
        if *v < 0.0 {
            if *v < -EIGEN_CLAMP {
                log::warn!("clamping eigenvalue {v:e} of a covariance product");
            }
            *v = 0.0;
        }
    }
    eig
}

fn sqrt_psd(m: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = clamped_eigen(m);
    let d = DMatrix::from_diagonal(&eig.eigenvalues.map(f64::sqrt));
    &eig.eigenvectors * d * eig.eigenvectors.transpose()
}

/// Fréchet distance between Gaussian fits of two feature sets (rows are
/// samples). `tr((Σr Σg)^½)` is taken as `tr((Σr^½ Σg Σr^½)^½)`, whose
/// argument is symmetric.
pub fn fid(real: &Tensor, generated: &Tensor) -> Result<f64> {
    if real.cols() != generated.cols() {
        return Err(Error::validation(format!(
            "feature widths differ: {} vs {}",
            real.cols(),
            generated.cols()
        )));
    }
    let need = real.cols() + 1;
    if real.rows() < need || generated.rows() < need {
        return Err(Error::validation(format!(
            "fid needs at least {need} samples per side, got {} and {}",
            real.rows(),
            generated.rows()
        )));
    }
    let (mr, cr) = mean_and_cov(&as_matrix(real));
    let (mg, cg) = mean_and_cov(&as_matrix(generated));
    let root = sqrt_psd(&cr);
    let inner = &root * &cg * &root;
    let cross: f64 = clamped_eigen(&inner).eigenvalues.iter().map(|v| v.sqrt()).sum();
    let value = (mr - mg).norm_squared() + cr.trace() + cg.trace() - 2.0 * cross;
    Ok(value.max(0.0))
}

/// Mean Euclidean distance over `pairs` random pairs of distinct rows.
pub fn diversity<R: Rng + ?Sized>(features: &Tensor, pairs: usize, rng: &mut R) -> Result<f64> {
    let n = features.rows();
    if n < 2 {
        return Err(Error::validation(format!("diversity needs at least 2 features, got {n}")));
    }
    if pairs == 0 {
        return Err(Error::validation("diversity needs at least one pair"));
    }
    let mut total = 0.0;
    for _ in 0..pairs {
        let i = rng.random_range(0..n);
        let mut j = rng.random_range(0..n - 1);
        if j >= i {
            j += 1;
        }
        total += distance(features.row_slice(i), features.row_slice(j));
    }
    Ok(total / pairs as f64)
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Rank of each motion's matched text among its batch of 32 (0 = first).
/// Ties resolve in favour of the matched text. The incomplete final batch is
/// dropped.
pub fn retrieval_ranks(motion: &Tensor, text: &Tensor, batch: usize) -> Result<Vec<usize>> {
    if motion.shape() != text.shape() {
        return Err(Error::validation(format!(
            "motion features {:?} and text features {:?} differ",
            motion.shape(),
            text.shape()
        )));
    }
    if batch == 0 || motion.rows() < batch {
        return Err(Error::validation(format!(
            "retrieval needs at least {batch} matched pairs, got {}",
            motion.rows()
        )));
    }
    let mut ranks = Vec::with_capacity(motion.rows() / batch * batch);
    for start in (0..motion.rows() / batch).map(|b| b * batch) {
        for i in start..start + batch {
            let m = motion.row_slice(i);
            let own = cosine(m, text.row_slice(i));
            let rank = (start..start + batch)
                .filter(|&j| j != i && cosine(m, text.row_slice(j)) > own)
                .count();
            ranks.push(rank);
        }
    }
    Ok(ranks)
}

/// Top-1/2/3 hit rates from retrieval ranks.
pub fn top_k(ranks: &[usize]) -> [f64; 3] {
    let n = ranks.len().max(1) as f64;
    [1, 2, 3].map(|k| ranks.iter().filter(|&&r| r < k).count() as f64 / n)
}

pub fn r_precision(motion: &Tensor, text: &Tensor, batch: usize) -> Result<[f64; 3]> {
    Ok(top_k(&retrieval_ranks(motion, text, batch)?))
}

/// Share of `resamples` bootstrap draws (indices sampled with replacement
/// from `0..n`) for which `holds` is true.
pub fn bootstrap_confidence<R: Rng + ?Sized>(
    n: usize,
    resamples: usize,
    rng: &mut R,
    mut holds: impl FnMut(&[usize]) -> Result<bool>,
) -> Result<f64> {
    if n == 0 || resamples == 0 {
        return Err(Error::validation("bootstrap needs samples and resamples"));
    }
    let mut idx = vec![0; n];
    let mut wins = 0usize;
    for _ in 0..resamples {
        for v in idx.iter_mut() {
            *v = rng.random_range(0..n);
        }
        wins += usize::from(holds(&idx)?);
    }
    Ok(wins as f64 / resamples as f64)
}

/// Rows of `t` picked by `idx`.
pub fn select_rows(t: &Tensor, idx: &[usize]) -> Tensor {
    let c = t.cols();
    let mut data = Vec::with_capacity(idx.len() * c);
    for &i in idx {
        data.extend_from_slice(t.row_slice(i));
    }
    Tensor::matrix(idx.len(), c, data).expect("sized from indices")
}
