//! Dense kernels shared by forward and backward rules.

use crate::tensor::Precision;

/// Strided matrix operand: element `(i, j)` lives at `data[i * rs + j * cs]`.
#[derive(Clone, Copy)]
pub(crate) struct Strided<'a> {
    pub data: &'a [f64],
    pub rs: usize,
    pub cs: usize,
}

impl<'a> Strided<'a> {
    pub fn rows(data: &'a [f64], cols: usize) -> Self {
        Self { data, rs: cols, cs: 1 }
    }

    /// The transpose of a row-major `rows x cols` matrix.
    pub fn transposed(data: &'a [f64], cols: usize) -> Self {
        Self { data, rs: 1, cs: cols }
    }

    pub fn offset(self, by: usize) -> Self {
        Self {
            data: &self.data[by..],
            ..self
        }
    }

    fn fits(&self, rows: usize, cols: usize) -> bool {
        rows == 0 || cols == 0 || (rows - 1) * self.rs + (cols - 1) * self.cs < self.data.len()
    }
}

/// `c <- alpha * a @ b + beta * c` for `a: m x k`, `b: k x n`, `c: m x n`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    precision: Precision,
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: Strided<'_>,
    b: Strided<'_>,
    beta: f64,
    c: &mut [f64],
    rsc: usize,
    csc: usize,
) {
    assert!(a.fits(m, k) && b.fits(k, n), "gemm operand out of bounds");
    assert!(m == 0 || n == 0 || (m - 1) * rsc + (n - 1) * csc < c.len(), "gemm output out of bounds");
    if m == 0 || n == 0 {
        return;
    }
    match precision {
        Precision::F64 => unsafe {
            // SAFETY: bounds of all three operands were checked above.
            matrixmultiply::dgemm(
                m, k, n, alpha,
                a.data.as_ptr(), a.rs as isize, a.cs as isize,
                b.data.as_ptr(), b.rs as isize, b.cs as isize,
                beta,
                c.as_mut_ptr(), rsc as isize, csc as isize,
            );
        },
        Precision::F32 => {
            let a32: Vec<f32> = a.data.iter().map(|x| *x as f32).collect();
            let b32: Vec<f32> = b.data.iter().map(|x| *x as f32).collect();
            let mut c32: Vec<f32> = c.iter().map(|x| *x as f32).collect();
            unsafe {
                // SAFETY: the f32 copies share the layouts checked above.
                matrixmultiply::sgemm(
                    m, k, n, alpha as f32,
                    a32.as_ptr(), a.rs as isize, a.cs as isize,
                    b32.as_ptr(), b.rs as isize, b.cs as isize,
                    beta as f32,
                    c32.as_mut_ptr(), rsc as isize, csc as isize,
                );
            }
            for (dst, src) in c.iter_mut().zip(&c32) {
                *dst = *src as f64;
            }
        }
    }
}

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_CUBIC: f64 = 0.044_715;

/// Tanh approximation of GeLU.
#[inline]
pub(crate) fn gelu(x: f64) -> f64 {
    let u = SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

#[inline]
pub(crate) fn gelu_grad(x: f64) -> f64 {
    let u = SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x);
    let th = u.tanh();
    let du = SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_CUBIC * x * x);
    0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * du
}

/// In-place softmax of each row of a `rows x cols` buffer.
pub(crate) fn softmax_rows(buf: &mut [f64], cols: usize) {
    for row in buf.chunks_mut(cols) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for x in row.iter_mut() {
            *x = (*x - max).exp();
            sum += *x;
        }
        for x in row.iter_mut() {
            *x /= sum;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_matches_naive_with_transposed_operand() {
        let a: Vec<f64> = (0..6).map(|x| x as f64).collect(); // 2x3
        let b: Vec<f64> = (0..12).map(|x| (x as f64) * 0.5).collect(); // 4x3, used as its transpose
        let mut c = vec![0.0; 8];
        gemm(Precision::F64, 2, 3, 4, 1.0, Strided::rows(&a, 3), Strided::transposed(&b, 3), 0.0, &mut c, 4, 1);
        for i in 0..2 {
            for j in 0..4 {
                let want: f64 = (0..3).map(|k| a[i * 3 + k] * b[j * 3 + k]).sum();
                assert_eq!(c[i * 4 + j], want);
            }
        }
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut v = vec![1.0, 2.0, 3.0, -1.0, -1.0, -1.0];
        softmax_rows(&mut v, 3);
        assert!((v[..3].iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert!((v[3] - 1.0 / 3.0).abs() < 1e-15);
    }
}
