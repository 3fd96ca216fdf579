//! Dense numeric kernels behind the tape ops.

use crate::par;

/// Rows per parallel work unit. Fixed so results do not depend on threads.
const ROW_BLOCK: usize = 128;

/// Strided read-only matrix view.
#[derive(Clone, Copy)]
pub(crate) struct MatRef<'a> {
    pub data: &'a [f64],
    pub rs: usize,
    pub cs: usize,
}

impl<'a> MatRef<'a> {
    pub fn row_major(data: &'a [f64], cols: usize) -> Self {
        Self {
            data,
            rs: cols,
            cs: 1,
        }
    }

    /// View of the transpose of a row-major `[rows, cols]` buffer.
    pub fn transposed(data: &'a [f64], cols: usize) -> Self {
        Self {
            data,
            rs: 1,
            cs: cols,
        }
    }

    fn check(&self, rows: usize, cols: usize) {
        if rows > 0 && cols > 0 {
            let last = (rows - 1) * self.rs + (cols - 1) * self.cs;
            assert!(last < self.data.len(), "matrix view out of bounds");
        }
    }
}

/// `c = a·b` (or `c += a·b` when `accumulate`), `c` row-major `[m, n]`.
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: MatRef<'_>,
    b: MatRef<'_>,
    c: &mut [f64],
    accumulate: bool,
) {
    assert_eq!(c.len(), m * n);
    a.check(m, k);
    b.check(k, n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c.fill(0.0);
        }
        return;
    }
    let beta = if accumulate { 1.0 } else { 0.0 };
    par::for_each_chunk_mut(c, ROW_BLOCK * n, |ci, c_chunk| {
        let row0 = ci * ROW_BLOCK;
        let rows = c_chunk.len() / n;
        let a_sub = &a.data[row0 * a.rs..];
        // SAFETY: bounds of `a`, `b` were checked for the full problem above,
        // `a_sub` starts at row `row0` and covers `rows` rows; `c_chunk` is an
        // exclusive row-major `[rows, n]` block.
        unsafe {
            matrixmultiply::dgemm(
                rows,
                k,
                n,
                1.0,
                a_sub.as_ptr(),
                a.rs as isize,
                a.cs as isize,
                b.data.as_ptr(),
                b.rs as isize,
                b.cs as isize,
                beta,
                c_chunk.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    });
}

/// Geometry of a stride-1, same-padded, channels-last 1-D convolution.
#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvDims {
    pub batch: usize,
    pub len: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
}

impl ConvDims {
    fn pad(&self) -> usize {
        (self.kernel - 1) / 2
    }

    pub fn col_width(&self) -> usize {
        self.c_in * self.kernel
    }
}

/// Unfolds `[batch, len, c_in]` into `[batch*len, c_in*kernel]`, column
/// index `ci*kernel + j` holding `x[b, l + j - pad, ci]` (zero outside).
pub(crate) fn im2col(x: &[f64], d: ConvDims) -> Vec<f64> {
    let width = d.col_width();
    let pad = d.pad() as isize;
    let mut cols = vec![0.0; d.batch * d.len * width];
    par::for_each_chunk_mut(&mut cols, d.len * width, |b, sample| {
        let xb = &x[b * d.len * d.c_in..(b + 1) * d.len * d.c_in];
        for l in 0..d.len {
            let row = &mut sample[l * width..(l + 1) * width];
            for j in 0..d.kernel {
                let src = l as isize + j as isize - pad;
                if src < 0 || src >= d.len as isize {
                    continue;
                }
                let xs = &xb[src as usize * d.c_in..(src as usize + 1) * d.c_in];
                for (ci, &v) in xs.iter().enumerate() {
                    row[ci * d.kernel + j] = v;
                }
            }
        }
    });
    cols
}

/// Adjoint of [`im2col`]: folds column gradients back onto the input.
pub(crate) fn col2im(dcols: &[f64], d: ConvDims) -> Vec<f64> {
    let width = d.col_width();
    let pad = d.pad() as isize;
    let mut dx = vec![0.0; d.batch * d.len * d.c_in];
    par::for_each_chunk_mut(&mut dx, d.len * d.c_in, |b, dxb| {
        let sample = &dcols[b * d.len * width..(b + 1) * d.len * width];
        for l in 0..d.len {
            let row = &sample[l * width..(l + 1) * width];
            for j in 0..d.kernel {
                let src = l as isize + j as isize - pad;
                if src < 0 || src >= d.len as isize {
                    continue;
                }
                let dst = &mut dxb[src as usize * d.c_in..(src as usize + 1) * d.c_in];
                for (ci, slot) in dst.iter_mut().enumerate() {
                    *slot += row[ci * d.kernel + j];
                }
            }
        }
    });
    dx
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(m: usize, k: usize, n: usize, a: &[f64], b: &[f64]) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                c[i * n + j] = (0..k).map(|p| a[i * k + p] * b[p * n + j]).sum();
            }
        }
        c
    }

    #[test]
    fn gemm_matches_naive_across_row_blocks() {
        let (m, k, n) = (300, 17, 9);
        let a: Vec<f64> = (0..m * k).map(|i| ((i * 7) % 13) as f64 - 6.0).collect();
        let b: Vec<f64> = (0..k * n).map(|i| ((i * 5) % 11) as f64 - 5.0).collect();
        let mut c = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            MatRef::row_major(&a, k),
            MatRef::row_major(&b, n),
            &mut c,
            false,
        );
        assert_eq!(c, naive(m, k, n, &a, &b));
    }

    #[test]
    fn gemm_transposed_view() {
        // a is stored as [k, m]; multiply by its transpose.
        let (m, k, n) = (3, 2, 2);
        let a_t = vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let b = vec![1.0, 0.0, 0.0, 1.0];
        let mut c = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            MatRef::transposed(&a_t, m),
            MatRef::row_major(&b, n),
            &mut c,
            false,
        );
        assert_eq!(c, vec![1.0, 4.0, 2.0, 5.0, 3.0, 6.0]);
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        let d = ConvDims {
            batch: 2,
            len: 5,
            c_in: 3,
            c_out: 1,
            kernel: 3,
        };
        let x: Vec<f64> = (0..30).map(|i| (i as f64 * 0.37).sin()).collect();
        let y: Vec<f64> = (0..2 * 5 * 9).map(|i| (i as f64 * 0.11).cos()).collect();
        let lhs: f64 = im2col(&x, d).iter().zip(&y).map(|(a, b)| a * b).sum();
        let rhs: f64 = col2im(&y, d).iter().zip(&x).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }
}
