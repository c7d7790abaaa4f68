use super::{LinalgError, Matrix, Real, Result};

#[derive(Clone, Debug)]
pub struct Qr<T = f64> {
    /// `rows×cols`, orthonormal columns.
    pub q: Matrix<T>,
    /// `cols×cols`, upper triangular with a non-negative diagonal.
    pub r: Matrix<T>,
}

/// Householder reduced QR of a tall matrix.
///
/// Columns that are linearly dependent on earlier ones get a zero diagonal in
/// `r`; the matching column of `q` is the reflected unit vector, so `q` stays
/// orthonormal and deterministic.
pub fn reduced_qr<T: Real>(a: &Matrix<T>) -> Result<Qr<T>> {
    let (m, n) = a.shape();
    if m < n {
        return Err(LinalgError::TooFewRows { rows: m, cols: n });
    }
    let mut w = a.clone();
    let mut reflectors: Vec<Option<Vec<T>>> = Vec::with_capacity(n);

    for j in 0..n {
        let norm = (j..m).map(|i| w[(i, j)] * w[(i, j)]).sum::<T>().sqrt();
        if norm == T::zero() {
            reflectors.push(None);
            continue;
        }
        let x0 = w[(j, j)];
        let alpha = if x0 >= T::zero() { -norm } else { norm };
        let mut v: Vec<T> = (j..m).map(|i| w[(i, j)]).collect();
        v[0] -= alpha;
        let vnorm = v.iter().map(|&x| x * x).sum::<T>().sqrt();
        if vnorm == T::zero() {
            reflectors.push(None);
            continue;
        }
        v.iter_mut().for_each(|x| *x /= vnorm);
        apply_reflector(&mut w, &v, j, j);
        // Clean the annihilated part exactly.
        w[(j, j)] = alpha;
        for i in j + 1..m {
            w[(i, j)] = T::zero();
        }
        reflectors.push(Some(v));
    }

    let mut r = Matrix::from_fn(n, n, |i, k| if k >= i { w[(i, k)] } else { T::zero() });
    let mut q = Matrix::from_fn(m, n, |i, k| if i == k { T::one() } else { T::zero() });
    for (j, v) in reflectors.iter().enumerate().rev() {
        if let Some(v) = v {
            apply_reflector(&mut q, v, j, 0);
        }
    }
    for j in 0..n {
        if r[(j, j)] < T::zero() {
            for k in 0..n {
                r[(j, k)] = -r[(j, k)];
            }
            for i in 0..m {
                q[(i, j)] = -q[(i, j)];
            }
        }
    }
    Ok(Qr { q, r })
}

/// `w[row0.., col0..] ← (I − 2vvᵀ)·w[row0.., col0..]`.
fn apply_reflector<T: Real>(w: &mut Matrix<T>, v: &[T], row0: usize, col0: usize) {
    let two = T::lit(2.0);
    for k in col0..w.cols() {
        let dot = v.iter().enumerate().map(|(i, &vi)| vi * w[(row0 + i, k)]).sum::<T>();
        if dot == T::zero() {
            continue;
        }
        for (i, &vi) in v.iter().enumerate() {
            w[(row0 + i, k)] -= two * dot * vi;
        }
    }
}
