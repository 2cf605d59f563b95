//! Strided matrix product wrapper around `matrixmultiply::dgemm`.

/// Strided view of a matrix stored in a flat slice.
#[derive(Clone, Copy)]
pub(crate) struct View<'a> {
    pub data: &'a [f64],
    pub offset: usize,
    pub rs: usize,
    pub cs: usize,
}

impl<'a> View<'a> {
    pub fn rows(data: &'a [f64], cols: usize) -> Self {
        View {
            data,
            offset: 0,
            rs: cols,
            cs: 1,
        }
    }

    /// Transposed view of a row-major `[r, c]` matrix, addressed as `[c, r]`.
    pub fn transposed(data: &'a [f64], cols: usize) -> Self {
        View {
            data,
            offset: 0,
            rs: 1,
            cs: cols,
        }
    }

    pub fn strides(data: &'a [f64], offset: usize, rs: usize, cs: usize) -> Self {
        View {
            data,
            offset,
            rs,
            cs,
        }
    }

    fn last_index(&self, rows: usize, cols: usize) -> usize {
        self.offset + (rows.max(1) - 1) * self.rs + (cols.max(1) - 1) * self.cs
    }
}

/// `c = alpha * a[m,k] * b[k,n] + beta * c`, with `c` addressed by
/// `c_off + i * c_rs + j * c_cs`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: View<'_>,
    b: View<'_>,
    beta: f64,
    c: &mut [f64],
    c_off: usize,
    c_rs: usize,
    c_cs: usize,
) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for i in 0..m {
            for j in 0..n {
                let idx = c_off + i * c_rs + j * c_cs;
                c[idx] *= beta;
            }
        }
        return;
    }
    assert!(a.last_index(m, k) < a.data.len(), "gemm: lhs view out of bounds");
    assert!(b.last_index(k, n) < b.data.len(), "gemm: rhs view out of bounds");
    assert!(
        c_off + (m - 1) * c_rs + (n - 1) * c_cs < c.len(),
        "gemm: output view out of bounds"
    );
    // SAFETY: every addressed element was bounds-checked above and the output
    // slice is exclusively borrowed.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.data.as_ptr().add(a.offset),
            a.rs as isize,
            a.cs as isize,
            b.data.as_ptr().add(b.offset),
            b.rs as isize,
            b.cs as isize,
            beta,
            c.as_mut_ptr().add(c_off),
            c_rs as isize,
            c_cs as isize,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(m: usize, k: usize, n: usize, a: &[f64], b: &[f64]) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    c[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        c
    }

    #[test]
    fn matches_naive_product() {
        let (m, k, n) = (5, 7, 3);
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.11).cos()).collect();
        let mut c = vec![0.0; m * n];
        gemm(m, k, n, 1.0, View::rows(&a, k), View::rows(&b, n), 0.0, &mut c, 0, n, 1);
        let expect = naive(m, k, n, &a, &b);
        for (x, y) in c.iter().zip(&expect) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn transposed_view_reads_columns() {
        // a is stored as [k, m]; use its transpose.
        let (m, k, n) = (2, 3, 2);
        let a_t = vec![1.0, 4.0, 2.0, 5.0, 3.0, 6.0];
        let a = vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let b = vec![1.0, 0.0, 0.0, 1.0, 1.0, 1.0];
        let mut c = vec![0.0; m * n];
        gemm(m, k, n, 1.0, View::transposed(&a_t, m), View::rows(&b, n), 0.0, &mut c, 0, n, 1);
        assert_eq!(c, naive(m, k, n, &a, &b));
    }
}
