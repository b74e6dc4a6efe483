//! GEMM entry points over row-major slices, backed by `matrixmultiply`.
//!
//! Output rows are processed in fixed blocks so the parallel and sequential
//! builds perform the same floating-point operations per element.

use crate::exec;

const ROW_BLOCK: usize = 32;

/// Strided operand description: element `(i, k)` lives at `i * rs + k * cs`.
#[derive(Clone, Copy)]
pub(crate) struct Operand<'a> {
    pub data: &'a [f64],
    pub rs: usize,
    pub cs: usize,
}

impl<'a> Operand<'a> {
    pub fn rows(data: &'a [f64], cols: usize) -> Self {
        Self { data, rs: cols, cs: 1 }
    }

    /// Transposed view of a row-major `[r, cols]` matrix.
    pub fn transposed(data: &'a [f64], cols: usize) -> Self {
        Self { data, rs: 1, cs: cols }
    }
}

/// `c[m, n] = beta * c + a[m, k] * b[k, n]`, with `c` dense row-major.
pub(crate) fn gemm(m: usize, k: usize, n: usize, a: Operand<'_>, b: Operand<'_>, beta: f64, c: &mut [f64]) {
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for v in c.iter_mut() {
            *v *= beta;
        }
        return;
    }
    let block = |bi: usize, c_block: &mut [f64]| {
        let i0 = bi * ROW_BLOCK;
        let rows = c_block.len() / n;
        // SAFETY: every pointer stays inside its slice: the a-block starts at
        // row i0 and spans `rows` rows, b is read in full, c_block is exactly
        // `rows * n` elements with row stride n.
        unsafe {
            matrixmultiply::dgemm(
                rows,
                k,
                n,
                1.0,
                a.data.as_ptr().add(i0 * a.rs),
                a.rs as isize,
                a.cs as isize,
                b.data.as_ptr(),
                b.rs as isize,
                b.cs as isize,
                beta,
                c_block.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    };
    if m * k * n < 1 << 16 {
        c.chunks_mut(ROW_BLOCK * n)
            .enumerate()
            .for_each(|(i, cb)| block(i, cb));
    } else {
        exec::for_each_chunk_mut(c, ROW_BLOCK * n, block);
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
    fn matches_naive_product_across_row_blocks() {
        let (m, k, n) = (70, 13, 9);
        let a: Vec<f64> = (0..m * k).map(|i| ((i * 7 % 11) as f64) - 5.0).collect();
        let b: Vec<f64> = (0..k * n).map(|i| ((i * 3 % 5) as f64) * 0.5).collect();
        let mut c = vec![0.0; m * n];
        gemm(m, k, n, Operand::rows(&a, k), Operand::rows(&b, n), 0.0, &mut c);
        assert_eq!(c, naive(m, k, n, &a, &b));
    }

    #[test]
    fn transposed_operand() {
        // a^T where a is [k, m]
        let (m, k, n) = (3, 4, 2);
        let at: Vec<f64> = (0..k * m).map(|i| i as f64).collect();
        let mut a = vec![0.0; m * k];
        for i in 0..m {
            for p in 0..k {
                a[i * k + p] = at[p * m + i];
            }
        }
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64) - 2.0).collect();
        let mut c = vec![1.0; m * n];
        gemm(m, k, n, Operand::transposed(&at, m), Operand::rows(&b, n), 1.0, &mut c);
        let expect: Vec<f64> = naive(m, k, n, &a, &b).iter().map(|v| v + 1.0).collect();
        assert_eq!(c, expect);
    }
}
