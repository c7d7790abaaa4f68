//! Oracles shared by the integration tests. Linear algebra here goes through
//! nalgebra so it never relies on the crate's own solvers.

#![allow(dead_code)]

use nalgebra::DMatrix;
use specscale::linalg::{matmul, matmul_nt, Matrix, Rng};

pub fn to_na(m: &Matrix) -> DMatrix<f64> {
    DMatrix::from_fn(m.rows(), m.cols(), |i, j| m[(i, j)])
}

pub fn from_na(m: &DMatrix<f64>) -> Matrix {
    Matrix::from_fn(m.nrows(), m.ncols(), |i, j| m[(i, j)])
}

/// Singular values, descending.
pub fn singular_values(m: &Matrix) -> Vec<f64> {
    let mut s: Vec<f64> = to_na(m).singular_values().iter().copied().collect();
    s.sort_by(|a, b| b.total_cmp(a));
    s
}

/// Number of singular values above `rel · σ_max`.
pub fn numerical_rank(m: &Matrix, rel: f64) -> usize {
    let s = singular_values(m);
    let top = s.first().copied().unwrap_or(0.0);
    if top == 0.0 {
        return 0;
    }
    s.iter().filter(|&&x| x > rel * top).count()
}

/// Orthogonal polar factor `UVᵀ`.
pub fn polar(m: &Matrix) -> Matrix {
    let svd = to_na(m).svd(true, true);
    from_na(&(svd.u.unwrap() * svd.v_t.unwrap()))
}

pub fn gaussian(rows: usize, cols: usize, rng: &mut Rng) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.normal())
}

/// `n×k` matrix with orthonormal columns (`k ≤ n`).
pub fn orthonormal_columns(n: usize, k: usize, rng: &mut Rng) -> DMatrix<f64> {
    let g = to_na(&gaussian(n, k, rng));
    g.qr().q()
}

/// `U·diag(σ)·Vᵀ` with Haar-like random `U`, `V`.
pub fn with_singular_values(m: usize, n: usize, sigma: &[f64], rng: &mut Rng) -> Matrix {
    let k = m.min(n);
    assert_eq!(sigma.len(), k);
    let u = orthonormal_columns(m, k, rng);
    let v = orthonormal_columns(n, k, rng);
    let s = DMatrix::from_diagonal(&nalgebra::DVector::from_column_slice(sigma));
    from_na(&(u * s * v.transpose()))
}

/// Draw from the fixed test family of conditioned matrices: `m, n` uniform
/// in `[2, 64]`, condition number `κ` log-uniform in `[1, 100]`, singular
/// values log-uniform in `[1/κ, 1]` with both extremes present.
pub fn conditioned_matrix(rng: &mut Rng) -> (Matrix, f64) {
    let m = 2 + rng.below(63);
    let n = 2 + rng.below(63);
    let k = m.min(n);
    let kappa = 100f64.powf(rng.uniform());
    let mut sigma: Vec<f64> = (0..k).map(|_| kappa.powf(-rng.uniform())).collect();
    sigma[0] = 1.0;
    sigma[k - 1] = 1.0 / kappa;
    (with_singular_values(m, n, &sigma, rng), kappa)
}

/// `½‖WX − Y‖²/n` and its gradient.
pub struct Quadratic {
    pub x: Matrix,
    pub y: Matrix,
}

impl Quadratic {
    pub fn new(rows: usize, cols: usize, n: usize, rng: &mut Rng) -> Self {
        let x = gaussian(cols, n, rng);
        let target = gaussian(rows, cols, rng);
        let y = matmul(&target, &x).unwrap();
        Self { x, y }
    }

    pub fn residual(&self, w: &Matrix) -> Matrix {
        matmul(w, &self.x).unwrap().sub(&self.y).unwrap()
    }

    pub fn loss(&self, w: &Matrix) -> f64 {
        let r = self.residual(w);
        0.5 * r.data().iter().map(|v| v * v).sum::<f64>() / self.x.cols() as f64
    }

    pub fn grad(&self, w: &Matrix) -> Matrix {
        matmul_nt(&self.residual(w), &self.x).unwrap().scale(1.0 / self.x.cols() as f64)
    }
}

pub fn max_abs_diff(a: &Matrix, b: &Matrix) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// CPU time consumed by the calling thread.
pub fn thread_cpu_seconds() -> f64 {
    let mut ts = libc::timespec { tv_sec: 0, tv_nsec: 0 };
    // SAFETY: `ts` is a valid out-pointer for the duration of the call.
    unsafe { libc::clock_gettime(libc::CLOCK_THREAD_CPUTIME_ID, &mut ts) };
    ts.tv_sec as f64 + ts.tv_nsec as f64 * 1e-9
}
