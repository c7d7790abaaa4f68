use std::cmp::Ordering;

use super::{LinalgError, Matrix, Result};

const MAX_SWEEPS: usize = 100;
const SYMMETRY_TOL: f64 = 1e-9;
const TIE_TOL: f64 = 1e-12;

/// Eigen-decomposition of a symmetric matrix, eigenvalues descending.
#[derive(Clone, Debug)]
pub struct SymmetricEig {
    pub eigenvalues: Vec<f64>,
    /// Column `i` is the unit eigenvector of `eigenvalues[i]`.
    pub eigenvectors: Matrix,
}

fn check_symmetric(a: &Matrix) -> Result<()> {
    let (rows, cols) = a.shape();
    if rows != cols {
        return Err(LinalgError::NotSquare { rows, cols });
    }
    if let Some((i, j)) = (0..rows)
        .flat_map(|i| (0..cols).map(move |j| (i, j)))
        .find(|&(i, j)| !a[(i, j)].is_finite())
    {
        return Err(LinalgError::NonFinite { row: i, col: j });
    }
    let scale = a.data().iter().fold(0.0f64, |m, x| m.max(x.abs()));
    if scale == 0.0 {
        return Ok(());
    }
    let mut worst = 0.0f64;
    for i in 0..rows {
        for j in i + 1..cols {
            worst = worst.max((a[(i, j)] - a[(j, i)]).abs() / scale);
        }
    }
    if worst > SYMMETRY_TOL {
        return Err(LinalgError::NotSymmetric { asymmetry: worst });
    }
    Ok(())
}

/// Cyclic Jacobi eigensolver.
///
/// Eigenvectors are sign-normalized so their first nonzero component is
/// positive; eigenvalues within `1e-12` of each other are ordered by the
/// lexicographically larger eigenvector first.
pub fn symmetric_eig(a: &Matrix) -> Result<SymmetricEig> {
    check_symmetric(a)?;
    let n = a.rows();
    // Work on the symmetrized copy so tiny asymmetries cannot bias rotations.
    let mut w = Matrix::from_fn(n, n, |i, j| 0.5 * (a[(i, j)] + a[(j, i)]));
    let mut v = Matrix::<f64>::identity(n);

    let total: f64 = w.data().iter().map(|x| x * x).sum();
    let mut converged = n < 2;
    for _ in 0..MAX_SWEEPS {
        let off: f64 = (0..n).flat_map(|p| (p + 1..n).map(move |q| (p, q))).map(|(p, q)| w[(p, q)].powi(2)).sum();
        if off <= 1e-32 * total || off == 0.0 {
            converged = true;
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = w[(p, q)];
                if apq == 0.0 {
                    continue;
                }
                let app = w[(p, p)];
                let aqq = w[(q, q)];
                if apq.abs() < 1e-300 {
                    w[(p, q)] = 0.0;
                    w[(q, p)] = 0.0;
                    continue;
                }
                let theta = (aqq - app) / (2.0 * apq);
                let t = if theta.abs() > 1e150 {
                    0.5 / theta
                } else {
                    theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt())
                };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = w[(k, p)];
                    let akq = w[(k, q)];
                    w[(k, p)] = c * akp - s * akq;
                    w[(k, q)] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = w[(p, k)];
                    let aqk = w[(q, k)];
                    w[(p, k)] = c * apk - s * aqk;
                    w[(q, k)] = s * apk + c * aqk;
                }
                w[(p, q)] = 0.0;
                w[(q, p)] = 0.0;
                for k in 0..n {
                    let vkp = v[(k, p)];
                    let vkq = v[(k, q)];
                    v[(k, p)] = c * vkp - s * vkq;
                    v[(k, q)] = s * vkp + c * vkq;
                }
            }
        }
    }
    if !converged {
        return Err(LinalgError::NoConvergence { iterations: MAX_SWEEPS });
    }

    let mut pairs: Vec<(f64, Vec<f64>)> = (0..n)
        .map(|i| {
            let mut vec = v.column(i);
            if let Some(first) = vec.iter().find(|x| x.abs() > 1e-14) {
                if *first < 0.0 {
                    vec.iter_mut().for_each(|x| *x = -*x);
                }
            }
            (w[(i, i)], vec)
        })
        .collect();
    pairs.sort_by(|a, b| {
        if (a.0 - b.0).abs() <= TIE_TOL * a.0.abs().max(b.0.abs()).max(1.0) {
            lexicographic(&b.1, &a.1)
        } else {
            b.0.partial_cmp(&a.0).unwrap_or(Ordering::Equal)
        }
    });

    let eigenvalues = pairs.iter().map(|p| p.0).collect();
    let eigenvectors = Matrix::from_fn(n, n, |i, j| pairs[j].1[i]);
    Ok(SymmetricEig { eigenvalues, eigenvectors })
}

fn lexicographic(a: &[f64], b: &[f64]) -> Ordering {
    for (x, y) in a.iter().zip(b) {
        match x.partial_cmp(y) {
            Some(Ordering::Equal) | None => continue,
            Some(o) => return o,
        }
    }
    Ordering::Equal
}

/// Eigenvalues only, descending, via Householder tridiagonalization and
/// implicit QL. Roughly an order of magnitude cheaper than Jacobi at the
/// widths used for covariance spectra.
pub fn symmetric_eigenvalues(a: &Matrix) -> Result<Vec<f64>> {
    check_symmetric(a)?;
    let n = a.rows();
    if n == 0 {
        return Ok(Vec::new());
    }
    // Lower triangle, row-major.
    let mut w: Vec<f64> = (0..n * n).map(|idx| {
        let (i, j) = (idx / n, idx % n);
        0.5 * (a[(i, j)] + a[(j, i)])
    }).collect();
    let mut d = vec![0.0; n];
    let mut e = vec![0.0; n];
    tridiagonalize(&mut w, n, &mut d, &mut e);
    implicit_ql(&mut d, &mut e)?;
    d.sort_by(|x, y| y.partial_cmp(x).unwrap_or(Ordering::Equal));
    Ok(d)
}

fn tridiagonalize(a: &mut [f64], n: usize, d: &mut [f64], e: &mut [f64]) {
    let at = |i: usize, j: usize| i * n + j;
    for i in (1..n).rev() {
        let l = i - 1;
        let mut h = 0.0;
        if l > 0 {
            let scale: f64 = (0..=l).map(|k| a[at(i, k)].abs()).sum();
            if scale == 0.0 {
                e[i] = a[at(i, l)];
            } else {
                for k in 0..=l {
                    a[at(i, k)] /= scale;
                    h += a[at(i, k)] * a[at(i, k)];
                }
                let f = a[at(i, l)];
                let g = if f >= 0.0 { -h.sqrt() } else { h.sqrt() };
                e[i] = scale * g;
                h -= f * g;
                a[at(i, l)] = f - g;
                let mut f = 0.0;
                for j in 0..=l {
                    let mut g = 0.0;
                    for k in 0..=j {
                        g += a[at(j, k)] * a[at(i, k)];
                    }
                    for k in j + 1..=l {
                        g += a[at(k, j)] * a[at(i, k)];
                    }
                    e[j] = g / h;
                    f += e[j] * a[at(i, j)];
                }
                let hh = f / (h + h);
                for j in 0..=l {
                    let f = a[at(i, j)];
                    let g = e[j] - hh * f;
                    e[j] = g;
                    for k in 0..=j {
                        a[at(j, k)] -= f * e[k] + g * a[at(i, k)];
                    }
                }
            }
        } else {
            e[i] = a[at(i, l)];
        }
        d[i] = h;
    }
    e[0] = 0.0;
    for i in 0..n {
        d[i] = a[at(i, i)];
    }
}

fn implicit_ql(d: &mut [f64], e: &mut [f64]) -> Result<()> {
    let n = d.len();
    for i in 1..n {
        e[i - 1] = e[i];
    }
    e[n - 1] = 0.0;
    // Off-diagonals below this are negligible against the whole matrix even
    // when both neighbouring diagonal entries have underflowed.
    let norm = d.iter().zip(e.iter()).fold(0.0f64, |m, (x, y)| m.max(x.abs() + y.abs()));
    let floor = f64::EPSILON * norm;
    for l in 0..n {
        let mut iter = 0;
        loop {
            let mut m = l;
            while m + 1 < n {
                let dd = d[m].abs() + d[m + 1].abs();
                if e[m].abs() <= f64::EPSILON * dd || e[m].abs() <= floor {
                    break;
                }
                m += 1;
            }
            if m == l {
                break;
            }
            iter += 1;
            if iter > 60 {
                return Err(LinalgError::NoConvergence { iterations: iter });
            }
            let mut g = (d[l + 1] - d[l]) / (2.0 * e[l]);
            let mut r = g.hypot(1.0);
            g = d[m] - d[l] + e[l] / (g + r.copysign(g));
            let (mut s, mut c, mut p) = (1.0f64, 1.0f64, 0.0f64);
            let mut deflated = false;
            let mut i = m;
            while i > l {
                i -= 1;
                let f = s * e[i];
                let b = c * e[i];
                r = f.hypot(g);
                e[i + 1] = r;
                if r == 0.0 {
                    d[i + 1] -= p;
                    e[m] = 0.0;
                    deflated = true;
                    break;
                }
                s = f / r;
                c = g / r;
                g = d[i + 1] - p;
                r = (d[i] - g) * s + 2.0 * c * b;
                p = s * r;
                d[i + 1] = g + p;
                g = c * r - b;
            }
            if deflated {
                continue;
            }
            d[l] -= p;
            e[l] = g;
            e[m] = 0.0;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{matmul, Rng};

    fn random_symmetric(rng: &mut Rng, n: usize) -> Matrix {
        let b = Matrix::from_fn(n, n, |_, _| rng.normal());
        Matrix::from_fn(n, n, |i, j| b[(i, j)] + b[(j, i)])
    }

    #[test]
    fn identity_eigenvalues() {
        let eig = symmetric_eig(&Matrix::identity(3)).unwrap();
        assert_eq!(eig.eigenvalues, vec![1.0, 1.0, 1.0]);
        assert_eq!(eig.eigenvectors, Matrix::identity(3));
    }

    #[test]
    fn diagonal_case() {
        let eig = symmetric_eig(&Matrix::diag(&[1.0, 3.0])).unwrap();
        assert_eq!(eig.eigenvalues, vec![3.0, 1.0]);
        assert_eq!(eig.eigenvectors, Matrix::from_rows(&[&[0.0, 1.0], &[1.0, 0.0]]));
    }

    #[test]
    fn reconstruction_and_orthogonality() {
        let mut rng = Rng::new(11);
        let a = random_symmetric(&mut rng, 8);
        let eig = symmetric_eig(&a).unwrap();
        let v = &eig.eigenvectors;
        let vl = Matrix::from_fn(8, 8, |i, j| v[(i, j)] * eig.eigenvalues[j]);
        let recon = matmul(&vl, &v.transpose()).unwrap();
        let resid = recon.sub(&a).unwrap().frobenius_norm() / a.frobenius_norm();
        assert!(resid < 1e-9, "{resid}");
        let vtv = matmul(&v.transpose(), v).unwrap();
        assert!(vtv.sub(&Matrix::identity(8)).unwrap().frobenius_norm() < 1e-10);
        assert!(eig.eigenvalues.windows(2).all(|w| w[0] >= w[1]));
    }

    #[test]
    fn tridiagonal_route_agrees_with_jacobi() {
        let mut rng = Rng::new(3);
        for n in [1, 2, 5, 17, 40] {
            let a = random_symmetric(&mut rng, n);
            let jac = symmetric_eig(&a).unwrap().eigenvalues;
            let ql = symmetric_eigenvalues(&a).unwrap();
            for (x, y) in jac.iter().zip(&ql) {
                assert!((x - y).abs() < 1e-9 * (1.0 + x.abs()), "n={n}: {x} vs {y}");
            }
        }
    }

    #[test]
    fn rejects_bad_input() {
        assert!(matches!(symmetric_eig(&Matrix::zeros(2, 3)), Err(LinalgError::NotSquare { .. })));
        let a = Matrix::from_rows(&[&[1.0, 2.0], &[0.0, 1.0]]);
        assert!(matches!(symmetric_eig(&a), Err(LinalgError::NotSymmetric { .. })));
        assert!(matches!(symmetric_eigenvalues(&a), Err(LinalgError::NotSymmetric { .. })));
    }
}
