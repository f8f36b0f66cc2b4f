//! Dense row-major matrices and the handful of kernels the model needs.

use rand::Rng;

#[derive(Clone, Debug, PartialEq)]
pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "shape {rows}x{cols} vs {} values", data.len());
        Self { rows, cols, data }
    }

    pub fn full(rows: usize, cols: usize, value: f64) -> Self {
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    /// Uniform Glorot initialization.
    pub fn glorot<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Self {
        let limit = (6.0 / (rows + cols) as f64).sqrt();
        Self::uniform(rows, cols, limit, rng)
    }

    pub fn uniform<R: Rng + ?Sized>(rows: usize, cols: usize, limit: f64, rng: &mut R) -> Self {
        let data = (0..rows * cols).map(|_| rng.gen_range(-limit..limit)).collect();
        Self { rows, cols, data }
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn fill(&mut self, v: f64) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    pub fn add_assign(&mut self, other: &Mat) {
        debug_assert_eq!(self.shape(), other.shape());
        self.data.iter_mut().zip(&other.data).for_each(|(a, b)| *a += b);
    }

    pub fn scale(&mut self, s: f64) {
        self.data.iter_mut().for_each(|x| *x *= s);
    }

    /// Adds the row vector `bias` (1 x cols) to every row.
    pub fn add_row(&mut self, bias: &Mat) {
        debug_assert_eq!(bias.data.len(), self.cols);
        for r in self.data.chunks_mut(self.cols) {
            r.iter_mut().zip(&bias.data).for_each(|(a, b)| *a += b);
        }
    }

    /// Accumulates the column sums of `self` into `acc` (1 x cols).
    pub fn col_sums_into(&self, acc: &mut Mat) {
        for r in self.data.chunks(self.cols) {
            acc.data.iter_mut().zip(r).for_each(|(a, b)| *a += b);
        }
    }

    pub fn sum_sq(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum()
    }
}

/// `c = alpha * op(a) * op(b) + beta * c` on strided views.
///
/// `m x k` times `k x n`; strides are in elements.
#[allow(clippy::too_many_arguments)]
pub fn gemm_strided(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    rsa: usize,
    csa: usize,
    b: &[f64],
    rsb: usize,
    csb: usize,
    beta: f64,
    c: &mut [f64],
    rsc: usize,
    csc: usize,
) {
    if m == 0 || n == 0 {
        return;
    }
    let span = |rows: usize, cols: usize, rs: usize, cs: usize| {
        if rows == 0 || cols == 0 {
            0
        } else {
            (rows - 1) * rs + (cols - 1) * cs + 1
        }
    };
    assert!(a.len() >= span(m, k, rsa, csa), "gemm: lhs view out of bounds");
    assert!(b.len() >= span(k, n, rsb, csb), "gemm: rhs view out of bounds");
    assert!(c.len() >= span(m, n, rsc, csc), "gemm: output view out of bounds");
    // SAFETY: every view was bounds-checked above and `c` is exclusively borrowed.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        );
    }
}

/// `a * b`.
pub fn matmul(a: &Mat, b: &Mat) -> Mat {
    assert_eq!(a.cols, b.rows, "matmul shape mismatch");
    let mut c = Mat::zeros(a.rows, b.cols);
    gemm_strided(
        a.rows, a.cols, b.cols, 1.0, &a.data, a.cols, 1, &b.data, b.cols, 1, 0.0, &mut c.data,
        b.cols, 1,
    );
    c
}

/// `a * b^T`.
pub fn matmul_nt(a: &Mat, b: &Mat) -> Mat {
    assert_eq!(a.cols, b.cols, "matmul_nt shape mismatch");
    let mut c = Mat::zeros(a.rows, b.rows);
    gemm_strided(
        a.rows, a.cols, b.rows, 1.0, &a.data, a.cols, 1, &b.data, 1, b.cols, 0.0, &mut c.data,
        b.rows, 1,
    );
    c
}

/// `acc += a^T * b`.
pub fn add_matmul_tn(acc: &mut Mat, a: &Mat, b: &Mat) {
    assert_eq!(a.rows, b.rows, "matmul_tn shape mismatch");
    assert_eq!((acc.rows, acc.cols), (a.cols, b.cols));
    gemm_strided(
        a.cols, a.rows, b.cols, 1.0, &a.data, 1, a.cols, &b.data, b.cols, 1, 1.0, &mut acc.data,
        b.cols, 1,
    );
}

/// In-place numerically stable softmax of each row.
pub fn softmax_rows(m: &mut Mat) {
    for r in m.data.chunks_mut(m.cols) {
        let max = r.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in r.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        r.iter_mut().for_each(|v| *v /= sum);
    }
}

pub fn log_softmax_row(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    row.iter().map(|v| v - lse).collect()
}

/// Sinusoidal position encodings for positions `0..len`.
pub fn sinusoidal(len: usize, dim: usize) -> Mat {
    let mut pe = Mat::zeros(len, dim);
    for pos in 0..len {
        let row = pe.row_mut(pos);
        for i in (0..dim).step_by(2) {
            let freq = (10000f64).powf(-(i as f64) / dim as f64);
            let angle = pos as f64 * freq;
            row[i] = angle.sin();
            if i + 1 < dim {
                row[i + 1] = angle.cos();
            }
        }
    }
    pe
}
