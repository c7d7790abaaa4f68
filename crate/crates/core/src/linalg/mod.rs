//! Dense matrix primitives shared by the model, the optimizers and the
//! spectral analysis.
//!
//! Everything here is row-major. The training path runs in `f32`, spectral
//! analysis in `f64`; both go through the [`Real`] trait so the same kernels
//! serve either precision.

mod eigen;
mod qr;
mod rng;

pub use eigen::{symmetric_eig, symmetric_eigenvalues, SymmetricEig};
pub use qr::{reduced_qr, Qr};
pub use rng::Rng;

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{Index, IndexMut};

use num_traits::{Float, FromPrimitive, NumAssign};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LinalgError {
    #[error("{op}: dimension mismatch ({}x{} vs {}x{})", left.0, left.1, right.0, right.1)]
    DimensionMismatch {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },
    #[error("data length {len} does not match {rows}x{cols}")]
    BadLength { rows: usize, cols: usize, len: usize },
    #[error("matrix contains a non-finite entry at ({row}, {col})")]
    NonFinite { row: usize, col: usize },
    #[error("expected a square matrix, got {rows}x{cols}")]
    NotSquare { rows: usize, cols: usize },
    #[error("matrix is not symmetric (max relative asymmetry {asymmetry:e})")]
    NotSymmetric { asymmetry: f64 },
    #[error("reduced QR needs rows >= cols, got {rows}x{cols}")]
    TooFewRows { rows: usize, cols: usize },
    #[error("eigensolver failed to converge after {iterations} iterations")]
    NoConvergence { iterations: usize },
}

pub type Result<T> = std::result::Result<T, LinalgError>;

/// Floating-point element type with a deterministic GEMM kernel.
pub trait Real:
    Float + FromPrimitive + NumAssign + Default + Debug + Display + Send + Sync + Sum + 'static
{
    /// `c ← alpha·a·b + beta·c` on strided operands.
    ///
    /// # Safety
    /// Every strided index touched by an `m×k`, `k×n` and `m×n` walk must be
    /// in bounds of the respective pointer.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );

    /// Element-wise `exp`, in place.
    fn exp_in_place(xs: &mut [Self]) {
        xs.iter_mut().for_each(|x| *x = x.exp());
    }

    #[inline]
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("finite literal")
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl Real for f32 {
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }

    /// Branch-free Cephes-style `expf` (within 2 ulp on the clamped range)
    /// that the compiler can vectorize. Inputs are clamped to
    /// `[-87, 88]`; NaN propagates.
    fn exp_in_place(xs: &mut [f32]) {
        const ROUND: f32 = 12_582_912.0; // 1.5·2²³: adding and subtracting rounds to nearest
        for x in xs {
            let v = if *x < -87.0 {
                -87.0
            } else if *x > 88.0 {
                88.0
            } else {
                *x
            };
            let shifted = v * std::f32::consts::LOG2_E + ROUND;
            let n = shifted - ROUND;
            // The rounded integer also sits in the low mantissa bits.
            let ni = shifted.to_bits().wrapping_sub(ROUND.to_bits()) as i32;
            let r = v - n * 0.693_359_4 + n * 2.121_944_4e-4;
            let p = ((((1.987_569_1e-4 * r + 1.398_199_9e-3) * r + 8.333_452e-3) * r + 4.166_579_6e-2) * r
                + 0.166_666_65)
                * r
                + 0.5;
            let y = p * r * r + r + 1.0;
            *x = y * f32::from_bits((ni.wrapping_add(127) as u32) << 23);
        }
    }
}

impl Real for f64 {
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

/// Read-only strided view used as a GEMM operand.
#[derive(Clone, Copy)]
pub struct Strided<'a, T> {
    pub data: &'a [T],
    pub row_stride: usize,
    pub col_stride: usize,
}

impl<'a, T> Strided<'a, T> {
    /// Row-major block with leading dimension `ld`.
    pub fn rows(data: &'a [T], ld: usize) -> Self {
        Self { data, row_stride: ld, col_stride: 1 }
    }

    /// Transpose of a row-major block with leading dimension `ld`.
    pub fn transposed(data: &'a [T], ld: usize) -> Self {
        Self { data, row_stride: 1, col_stride: ld }
    }

    fn check(&self, rows: usize, cols: usize) {
        if rows == 0 || cols == 0 {
            return;
        }
        let last = (rows - 1) * self.row_stride + (cols - 1) * self.col_stride;
        assert!(last < self.data.len(), "strided operand out of bounds");
    }
}

/// `c[m×n] ← alpha·a[m×k]·b[k×n] + beta·c`, with `c` row-major at leading
/// dimension `ldc`. Summation order depends only on the shapes, so results
/// are bit-reproducible for identical inputs.
#[allow(clippy::too_many_arguments)]
pub fn gemm<T: Real>(
    m: usize,
    k: usize,
    n: usize,
    alpha: T,
    a: Strided<'_, T>,
    b: Strided<'_, T>,
    beta: T,
    c: &mut [T],
    ldc: usize,
) {
    if m == 0 || n == 0 {
        return;
    }
    a.check(m, k);
    b.check(k, n);
    assert!((m - 1) * ldc + n <= c.len(), "gemm output out of bounds");
    // SAFETY: bounds of all three operands were checked above.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            alpha,
            a.data.as_ptr(),
            a.row_stride as isize,
            a.col_stride as isize,
            b.data.as_ptr(),
            b.row_stride as isize,
            b.col_stride as isize,
            beta,
            c.as_mut_ptr(),
            ldc as isize,
            1,
        );
    }
}

/// Dense row-major matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix<T = f64> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Real> Matrix<T> {
    /// Builds a matrix from row-major data, rejecting bad lengths and
    /// non-finite entries.
    pub fn new(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(LinalgError::BadLength { rows, cols, len: data.len() });
        }
        if let Some(i) = data.iter().position(|x| !x.is_finite()) {
            return Err(LinalgError::NonFinite { row: i / cols.max(1), col: i % cols.max(1) });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![T::zero(); rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = T::one();
        }
        m
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    /// Convenience constructor from nested rows; panics on ragged input.
    pub fn from_rows(rows: &[&[T]]) -> Self {
        let cols = rows.first().map_or(0, |r| r.len());
        assert!(rows.iter().all(|r| r.len() == cols), "ragged rows");
        Self { rows: rows.len(), cols, data: rows.iter().flat_map(|r| r.iter().copied()).collect() }
    }

    pub fn diag(values: &[T]) -> Self {
        let n = values.len();
        let mut m = Self::zeros(n, n);
        for (i, &v) in values.iter().enumerate() {
            m.data[i * n + i] = v;
        }
        m
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
    pub fn data(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [T] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn column(&self, j: usize) -> Vec<T> {
        (0..self.rows).map(|i| self.data[i * self.cols + j]).collect()
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |i, j| self[(j, i)])
    }

    pub fn frobenius_norm(&self) -> T {
        self.data.iter().map(|&x| x * x).sum::<T>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn scale(&self, s: T) -> Self {
        Self { rows: self.rows, cols: self.cols, data: self.data.iter().map(|&x| x * s).collect() }
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    fn zip_with(&self, other: &Self, op: &'static str, f: impl Fn(T, T) -> T) -> Result<Self> {
        if self.shape() != other.shape() {
            return Err(LinalgError::DimensionMismatch { op, left: self.shape(), right: other.shape() });
        }
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
        Ok(Self { rows: self.rows, cols: self.cols, data })
    }

    /// Converts element type (e.g. `f32` training weights to `f64`).
    pub fn cast<U: Real>(&self) -> Matrix<U> {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| U::from_f64(x.as_f64()).unwrap_or(U::nan())).collect(),
        }
    }

    pub fn as_strided(&self) -> Strided<'_, T> {
        Strided::rows(&self.data, self.cols)
    }

    pub fn as_strided_t(&self) -> Strided<'_, T> {
        Strided::transposed(&self.data, self.cols)
    }
}

impl<T> Index<(usize, usize)> for Matrix<T> {
    type Output = T;
    #[inline]
    fn index(&self, (i, j): (usize, usize)) -> &T {
        &self.data[i * self.cols + j]
    }
}

impl<T> IndexMut<(usize, usize)> for Matrix<T> {
    #[inline]
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut T {
        &mut self.data[i * self.cols + j]
    }
}

/// Matrix product `a·b`.
pub fn matmul<T: Real>(a: &Matrix<T>, b: &Matrix<T>) -> Result<Matrix<T>> {
    if a.cols != b.rows {
        return Err(LinalgError::DimensionMismatch { op: "matmul", left: a.shape(), right: b.shape() });
    }
    let mut c = Matrix::zeros(a.rows, b.cols);
    gemm(a.rows, a.cols, b.cols, T::one(), a.as_strided(), b.as_strided(), T::zero(), &mut c.data, b.cols);
    Ok(c)
}

/// `aᵀ·b` without materializing the transpose.
pub fn matmul_tn<T: Real>(a: &Matrix<T>, b: &Matrix<T>) -> Result<Matrix<T>> {
    if a.rows != b.rows {
        return Err(LinalgError::DimensionMismatch { op: "matmul_tn", left: a.shape(), right: b.shape() });
    }
    let mut c = Matrix::zeros(a.cols, b.cols);
    gemm(a.cols, a.rows, b.cols, T::one(), a.as_strided_t(), b.as_strided(), T::zero(), &mut c.data, b.cols);
    Ok(c)
}

/// `a·bᵀ` without materializing the transpose.
pub fn matmul_nt<T: Real>(a: &Matrix<T>, b: &Matrix<T>) -> Result<Matrix<T>> {
    if a.cols != b.cols {
        return Err(LinalgError::DimensionMismatch { op: "matmul_nt", left: a.shape(), right: b.shape() });
    }
    let mut c = Matrix::zeros(a.rows, b.rows);
    gemm(a.rows, a.cols, b.rows, T::one(), a.as_strided(), b.as_strided_t(), T::zero(), &mut c.data, b.rows);
    Ok(c)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fast_expf_matches_libm() {
        let mut xs: Vec<f32> = (0..20_000).map(|i| -87.0 + i as f32 * (175.0 / 20_000.0)).collect();
        let want: Vec<f32> = xs.iter().map(|x| x.exp()).collect();
        f32::exp_in_place(&mut xs);
        for (g, w) in xs.iter().zip(&want) {
            assert!(((g - w) / w).abs() < 3e-7, "{g} vs {w}");
        }
        let mut edge = [0.0f32, -200.0, f32::NAN];
        f32::exp_in_place(&mut edge);
        assert_eq!(edge[0], 1.0);
        assert!(edge[1] < 2e-38 && edge[1] >= 0.0);
        assert!(edge[2].is_nan());
    }

    fn naive(a: &Matrix, b: &Matrix) -> Matrix {
        Matrix::from_fn(a.rows(), b.cols(), |i, j| (0..a.cols()).map(|k| a[(i, k)] * b[(k, j)]).sum())
    }

    #[test]
    fn identity_product() {
        let a = Matrix::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]);
        assert_eq!(matmul(&Matrix::identity(2), &a).unwrap(), a);
    }

    #[test]
    fn hand_product() {
        let a = Matrix::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]);
        let b = Matrix::from_rows(&[&[0.0], &[1.0]]);
        assert_eq!(matmul(&a, &b).unwrap(), Matrix::from_rows(&[&[2.0], &[4.0]]));
    }

    #[test]
    fn random_product_matches_triple_loop() {
        let mut rng = Rng::new(7);
        let a = Matrix::from_fn(7, 5, |_, _| rng.normal());
        let b = Matrix::from_fn(5, 3, |_, _| rng.normal());
        let c = matmul(&a, &b).unwrap();
        let oracle = naive(&a, &b);
        for (x, y) in c.data().iter().zip(oracle.data()) {
            assert!((x - y).abs() < 1e-12);
        }
        let tn = matmul_tn(&a.transpose(), &b).unwrap();
        let nt = matmul_nt(&a, &b.transpose()).unwrap();
        for ((x, y), z) in tn.data().iter().zip(nt.data()).zip(oracle.data()) {
            assert!((x - z).abs() < 1e-12 && (y - z).abs() < 1e-12);
        }
    }

    #[test]
    fn dimension_mismatch() {
        let a = Matrix::<f64>::zeros(2, 3);
        assert!(matches!(matmul(&a, &a), Err(LinalgError::DimensionMismatch { .. })));
    }

    #[test]
    fn rejects_non_finite() {
        assert!(matches!(Matrix::new(1, 2, vec![1.0, f64::NAN]), Err(LinalgError::NonFinite { row: 0, col: 1 })));
        assert!(matches!(Matrix::new(2, 2, vec![1.0]), Err(LinalgError::BadLength { .. })));
    }
}
