//! Small dense helpers shared by the oracles.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

/// Eigen-decomposition of a symmetric matrix with eigenvalues sorted ascending.
pub fn sym_eigen(m: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let n = m.nrows();
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let vals = DVector::from_iterator(n, order.iter().map(|&i| eig.eigenvalues[i]));
    let mut vecs = DMatrix::zeros(n, n);
    for (k, &i) in order.iter().enumerate() {
        vecs.set_column(k, &eig.eigenvectors.column(i));
    }
    (vals, vecs)
}

pub fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 0 {
        return f64::INFINITY;
    }
    sym_eigen(m).0[0]
}

/// Clip the spectrum of a symmetric matrix to be nonnegative.
pub fn psd_part(m: &DMatrix<f64>) -> DMatrix<f64> {
    let (vals, vecs) = sym_eigen(m);
    let clipped = DMatrix::from_diagonal(&vals.map(|x| x.max(0.0)));
    &vecs * clipped * vecs.transpose()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// Nonnegative least squares, `min ||A x - b||` over `x >= 0` (Lawson and Hanson).
///
/// The returned solution has linearly independent support columns, so it has
/// at most `rank(A)` nonzero entries.
pub fn nnls(a: &DMatrix<f64>, b: &DVector<f64>) -> DVector<f64> {
    let (m, n) = a.shape();
    let mut x = DVector::zeros(n);
    let mut passive = vec![false; n];
    let scale = a.iter().fold(0.0f64, |acc, v| acc.max(v.abs())).max(1e-300);
    let tol = 10.0 * f64::EPSILON * scale * (m.max(n) as f64);
    let max_outer = 3 * n + 10;

    let mut w = a.transpose() * (b - a * &x);
    for _ in 0..max_outer {
        let mut best = None;
        let mut best_w = tol;
        for j in 0..n {
            if !passive[j] && w[j] > best_w {
                best_w = w[j];
                best = Some(j);
            }
        }
        let Some(j) = best else { break };
        passive[j] = true;

        let mut inner = 0;
        loop {
            inner += 1;
            let idx: Vec<usize> = (0..n).filter(|&i| passive[i]).collect();
            let s_p = lstsq_columns(a, &idx, b);
            let mut s = DVector::zeros(n);
            for (k, &i) in idx.iter().enumerate() {
                s[i] = s_p[k];
            }
            if idx.iter().all(|&i| s[i] > 0.0) || inner > 3 * n + 10 {
                x = s;
                for i in 0..n {
                    if passive[i] && x[i] <= 0.0 {
                        x[i] = 0.0;
                        passive[i] = false;
                    }
                }
                break;
            }
            let mut alpha = f64::INFINITY;
            for &i in &idx {
                if s[i] <= 0.0 {
                    let denom = x[i] - s[i];
                    if denom > 0.0 {
                        alpha = alpha.min(x[i] / denom);
                    } else {
                        alpha = 0.0;
                    }
                }
            }
            if !alpha.is_finite() {
                alpha = 0.0;
            }
            x = &x + (s - &x) * alpha;
            for i in 0..n {
                if passive[i] && x[i] <= tol {
                    x[i] = 0.0;
                    passive[i] = false;
                }
            }
        }
        w = a.transpose() * (b - a * &x);
    }
    x
}

/// Least squares restricted to a subset of columns.
pub fn lstsq_columns(a: &DMatrix<f64>, cols: &[usize], b: &DVector<f64>) -> DVector<f64> {
    let m = a.nrows();
    let sub = DMatrix::from_fn(m, cols.len(), |r, c| a[(r, cols[c])]);
    lstsq(&sub, b)
}

pub fn lstsq(a: &DMatrix<f64>, b: &DVector<f64>) -> DVector<f64> {
    if a.ncols() == 0 {
        return DVector::zeros(0);
    }
    let svd = a.clone().svd(true, true);
    let smax = svd.singular_values.max();
    let eps = smax * 1e-13 * (a.nrows().max(a.ncols()) as f64);
    svd.solve(b, eps).unwrap_or_else(|_| DVector::zeros(a.ncols()))
}

/// A unit vector spanning part of the null space of `a`, if one exists at
/// relative tolerance `rtol`.
pub fn null_vector(a: &DMatrix<f64>, rtol: f64) -> Option<DVector<f64>> {
    let (m, n) = a.shape();
    if n == 0 {
        return None;
    }
    // Work with the Gram matrix so wide matrices are handled uniformly.
    let gram = a.transpose() * a;
    let (vals, vecs) = sym_eigen(&gram);
    let top = vals[n - 1].abs().max(1e-300);
    if n > m || vals[0] <= rtol * rtol * top {
        Some(vecs.column(0).into_owned())
    } else {
        None
    }
}
