//! Dense row-major kernels shared by the rest of the crate.

use rand_distr::{Distribution, StandardNormal};

use crate::rng::Rng;
use crate::{Error, Result};

/// Row-major dense matrix of `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape(format!(
                "{rows}x{cols} matrix needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self { rows, cols, data }
    }

    pub fn identity(n: usize) -> Self {
        Self::from_fn(n, n, |r, c| if r == c { 1.0 } else { 0.0 })
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn transpose(&self) -> Matrix {
        Matrix::from_fn(self.cols, self.rows, |r, c| self.get(c, r))
    }

    pub fn view(&self) -> MatRef<'_> {
        MatRef {
            data: &self.data,
            rows: self.rows,
            cols: self.cols,
            row_stride: self.cols as isize,
            col_stride: 1,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Borrowed strided view used to feed [`gemm`] without copying transposes.
#[derive(Debug, Clone, Copy)]
pub struct MatRef<'a> {
    data: &'a [f64],
    rows: usize,
    cols: usize,
    row_stride: isize,
    col_stride: isize,
}

impl<'a> MatRef<'a> {
    /// Row-major view over a slice.
    pub fn new(data: &'a [f64], rows: usize, cols: usize) -> Self {
        assert_eq!(data.len(), rows * cols, "view size mismatch");
        Self {
            data,
            rows,
            cols,
            row_stride: cols as isize,
            col_stride: 1,
        }
    }

    pub fn t(self) -> Self {
        Self {
            data: self.data,
            rows: self.cols,
            cols: self.rows,
            row_stride: self.col_stride,
            col_stride: self.row_stride,
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }
}

/// `c = alpha * a * b + beta * c`, with `c` row-major `a.rows x b.cols`.
///
/// When `beta == 0` the previous contents of `c` are ignored, NaN included.
pub fn gemm(alpha: f64, a: MatRef<'_>, b: MatRef<'_>, beta: f64, c: &mut [f64]) {
    assert_eq!(a.cols, b.rows, "gemm inner dimension mismatch");
    let (m, k, n) = (a.rows, a.cols, b.cols);
    assert_eq!(c.len(), m * n, "gemm output size mismatch");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for v in c.iter_mut() {
            *v = if beta == 0.0 { 0.0 } else { beta * *v };
        }
        return;
    }
    // SAFETY: the views were built from slices of exactly rows*cols elements
    // and transposition only swaps strides, so every (i, j) with i < rows and
    // j < cols addresses inside the backing slice. `c` is checked above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.data.as_ptr(),
            a.row_stride,
            a.col_stride,
            b.data.as_ptr(),
            b.row_stride,
            b.col_stride,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// `out = W x + b`.
pub fn dense_affine(w: &Matrix, b: &[f64], x: &[f64]) -> Result<Vec<f64>> {
    if w.cols != x.len() || w.rows != b.len() {
        return Err(Error::config(format!(
            "affine map {}x{} with bias {} applied to vector of length {}",
            w.rows,
            w.cols,
            b.len(),
            x.len()
        )));
    }
    Ok((0..w.rows)
        .map(|i| dot(w.row(i), x) + b[i])
        .collect())
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Numerically stable softmax.
pub fn softmax(v: &[f64]) -> Result<Vec<f64>> {
    if v.is_empty() {
        return Err(Error::config("softmax of an empty vector"));
    }
    let mut out = v.to_vec();
    softmax_in_place(&mut out);
    Ok(out)
}

/// Softmax over a nonempty slice, in place.
///
/// The normaliser is summed over the exponentials in ascending order, so the
/// result does not depend on the order of the inputs: permuting `v` permutes
/// the output bit for bit.
pub fn softmax_in_place(v: &mut [f64]) {
    debug_assert!(!v.is_empty());
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    for x in v.iter_mut() {
        *x = (*x - max).exp();
    }
    let total = sorted_sum(v);
    for x in v.iter_mut() {
        *x /= total;
    }
}

fn sorted_sum(v: &[f64]) -> f64 {
    let mut buf = v.to_vec();
    buf.sort_unstable_by(f64::total_cmp);
    buf.iter().sum()
}

/// Valid 2D cross-correlation (no padding, no kernel flip).
pub fn conv2d_valid(input: &Matrix, kernel: &Matrix) -> Result<Matrix> {
    let (kr, kc) = kernel.shape();
    if kr % 2 == 0 || kc % 2 == 0 {
        return Err(Error::config(format!("kernel {kr}x{kc} must have odd sides")));
    }
    if input.rows < kr || input.cols < kc {
        return Err(Error::shape(format!(
            "kernel {kr}x{kc} larger than input {}x{}",
            input.rows, input.cols
        )));
    }
    let (or, oc) = (input.rows - kr + 1, input.cols - kc + 1);
    Ok(Matrix::from_fn(or, oc, |r, c| {
        let mut acc = 0.0;
        for u in 0..kr {
            let irow = &input.row(r + u)[c..c + kc];
            acc += dot(kernel.row(u), irow);
        }
        acc
    }))
}

/// Truncated normal samples, rejection-sampled.
///
/// `lo` and `hi` are in standard-deviation units: every value lies in
/// `[mean + lo*std, mean + hi*std]`.
pub fn truncated_normal_init(
    rows: usize,
    cols: usize,
    mean: f64,
    std: f64,
    lo: f64,
    hi: f64,
    rng: &mut Rng,
) -> Result<Matrix> {
    if !(lo < hi) || !(std > 0.0) || !lo.is_finite() || !hi.is_finite() {
        return Err(Error::config(format!(
            "truncated normal needs lo < hi and std > 0 (lo={lo}, hi={hi}, std={std})"
        )));
    }
    if hi < -8.0 || lo > 8.0 {
        return Err(Error::config("truncation window has negligible mass"));
    }
    let mut data = Vec::with_capacity(rows * cols);
    while data.len() < rows * cols {
        let z: f64 = StandardNormal.sample(rng);
        if z >= lo && z <= hi {
            data.push(mean + std * z);
        }
    }
    Matrix::from_vec(rows, cols, data)
}
