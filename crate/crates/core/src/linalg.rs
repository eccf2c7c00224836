//! Small dense linear algebra: cyclic Jacobi for symmetric matrices,
//! one-sided Jacobi SVD, LU solves and subspace comparisons.
//!
//! Everything here targets n in the low hundreds. Matrices are
//! `ndarray::Array2<f64>`; eigen/singular vectors are stored as columns.

use ndarray::{s, Array1, Array2, ArrayView2, Axis};

use crate::error::{Error, Result};

const MAX_SWEEPS: usize = 100;

/// Eigenvalues in ascending order with matching eigenvector columns.
#[derive(Clone, Debug)]
pub struct SymmetricEigen {
    pub values: Array1<f64>,
    pub vectors: Array2<f64>,
}

impl SymmetricEigen {
    /// Reorders to descending eigenvalues.
    pub fn descending(mut self) -> Self {
        let n = self.values.len();
        let order: Vec<usize> = (0..n).rev().collect();
        self.values = order.iter().map(|&i| self.values[i]).collect();
        self.vectors = self.vectors.select(Axis(1), &order);
        self
    }
}

/// Thin SVD `A = U diag(sigma) V^T`, singular values descending.
#[derive(Clone, Debug)]
pub struct Svd {
    pub u: Array2<f64>,
    pub sigma: Array1<f64>,
    pub v: Array2<f64>,
}

pub fn is_symmetric(a: &Array2<f64>, tol: f64) -> bool {
    let (n, m) = a.dim();
    if n != m {
        return false;
    }
    for i in 0..n {
        for j in 0..i {
            if (a[[i, j]] - a[[j, i]]).abs() > tol {
                return false;
            }
        }
    }
    true
}

/// Flips each column so its first component with magnitude above `1e-10`
/// (relative to the column's largest entry) is positive.
pub fn canonicalize_signs(vectors: &mut Array2<f64>) {
    for mut col in vectors.columns_mut() {
        let scale = col.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if scale == 0.0 {
            continue;
        }
        if let Some(&first) = col.iter().find(|v| v.abs() > 1e-10 * scale) {
            if first < 0.0 {
                col.mapv_inplace(|v| -v);
            }
        }
    }
}

/// Cyclic Jacobi eigendecomposition of a symmetric matrix.
///
/// Only the upper triangle is trusted; asymmetry beyond `1e-10` relative to
/// the Frobenius norm is rejected.
pub fn symmetric_eigen(a: &Array2<f64>) -> Result<SymmetricEigen> {
    let (n, m) = a.dim();
    if n != m {
        return Err(Error::Shape(format!("eigen: matrix is {n}x{m}")));
    }
    let frob = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    if !frob.is_finite() {
        return Err(Error::Numerical("eigen: non-finite input".into()));
    }
    if !is_symmetric(a, 1e-10 * frob.max(1.0)) {
        return Err(Error::Precondition("eigen: matrix is not symmetric".into()));
    }

    let mut w: Vec<f64> = a.iter().copied().collect();
    let mut v = vec![0.0; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }

    let target = (f64::EPSILON * frob).powi(2);
    let mut converged = n <= 1;
    for _ in 0..MAX_SWEEPS {
        let mut off = 0.0;
        for p in 0..n {
            for q in (p + 1)..n {
                off += w[p * n + q] * w[p * n + q];
            }
        }
        if off <= target {
            converged = true;
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = w[p * n + q];
                if apq.abs() < f64::MIN_POSITIVE {
                    continue;
                }
                let app = w[p * n + p];
                let aqq = w[q * n + q];
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    if k == p || k == q {
                        continue;
                    }
                    let akp = w[k * n + p];
                    let akq = w[k * n + q];
                    let np = c * akp - s * akq;
                    let nq = s * akp + c * akq;
                    w[k * n + p] = np;
                    w[p * n + k] = np;
                    w[k * n + q] = nq;
                    w[q * n + k] = nq;
                }
                w[p * n + p] = app - t * apq;
                w[q * n + q] = aqq + t * apq;
                w[p * n + q] = 0.0;
                w[q * n + p] = 0.0;
                for k in 0..n {
                    let vkp = v[k * n + p];
                    let vkq = v[k * n + q];
                    v[k * n + p] = c * vkp - s * vkq;
                    v[k * n + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    if !converged {
        return Err(Error::Numerical(format!(
            "eigen: Jacobi did not converge in {MAX_SWEEPS} sweeps"
        )));
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| w[i * n + i].total_cmp(&w[j * n + j]));
    let values: Array1<f64> = order.iter().map(|&i| w[i * n + i]).collect();
    let mut vectors = Array2::zeros((n, n));
    for (col, &i) in order.iter().enumerate() {
        for k in 0..n {
            vectors[[k, col]] = v[k * n + i];
        }
    }
    canonicalize_signs(&mut vectors);
    Ok(SymmetricEigen { values, vectors })
}

/// One-sided (Hestenes) Jacobi SVD. Works directly on the columns of `a`
/// and never forms a Gram matrix.
pub fn jacobi_svd(a: &Array2<f64>) -> Result<Svd> {
    let (rows, cols) = a.dim();
    if rows < cols {
        let t = jacobi_svd(&a.t().to_owned())?;
        return Ok(Svd {
            u: t.v,
            sigma: t.sigma,
            v: t.u,
        });
    }
    if a.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("svd: non-finite input".into()));
    }
    let mut work = a.to_owned();
    let mut v = Array2::<f64>::eye(cols);
    let mut converged = cols <= 1;
    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        for i in 0..cols {
            for j in (i + 1)..cols {
                let ci = work.column(i);
                let cj = work.column(j);
                let alpha = ci.dot(&ci);
                let beta = cj.dot(&cj);
                let gamma = ci.dot(&cj);
                if gamma.abs() <= 1e-15 * (alpha * beta).sqrt() || gamma == 0.0 {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for k in 0..rows {
                    let x = work[[k, i]];
                    let y = work[[k, j]];
                    work[[k, i]] = c * x - s * y;
                    work[[k, j]] = s * x + c * y;
                }
                for k in 0..cols {
                    let x = v[[k, i]];
                    let y = v[[k, j]];
                    v[[k, i]] = c * x - s * y;
                    v[[k, j]] = s * x + c * y;
                }
            }
        }
        if !rotated {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::Numerical(format!(
            "svd: one-sided Jacobi did not converge in {MAX_SWEEPS} sweeps"
        )));
    }

    let norms: Vec<f64> = work.columns().into_iter().map(|c| c.dot(&c).sqrt()).collect();
    let mut order: Vec<usize> = (0..cols).collect();
    order.sort_by(|&i, &j| norms[j].total_cmp(&norms[i]));
    let sigma: Array1<f64> = order.iter().map(|&i| norms[i]).collect();
    let mut u = Array2::zeros((rows, cols));
    let v_sorted = v.select(Axis(1), &order);
    for (col, &i) in order.iter().enumerate() {
        if norms[i] > 0.0 {
            let c = work.column(i).mapv(|x| x / norms[i]);
            u.column_mut(col).assign(&c);
        }
    }
    let mut u = u;
    let mut v = v_sorted;
    // Apply the left-vector sign convention and mirror it on the right.
    for col in 0..cols {
        let c = u.column(col);
        let scale = c.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        if let Some(&first) = c.iter().find(|x| x.abs() > 1e-10 * scale) {
            if first < 0.0 {
                u.column_mut(col).mapv_inplace(|x| -x);
                v.column_mut(col).mapv_inplace(|x| -x);
            }
        }
    }
    Ok(Svd { u, sigma, v })
}

/// Left singular vectors and singular values from the eigendecomposition of
/// `A A^T`. Accurate for the leading directions; trailing singular values
/// below `sqrt(eps) * sigma_max` lose relative accuracy.
pub fn left_singular_via_gram(a: &Array2<f64>) -> Result<(Array1<f64>, Array2<f64>)> {
    let gram = a.dot(&a.t());
    let gram = (&gram + &gram.t()) * 0.5;
    let eig = symmetric_eigen(&gram)?.descending();
    let sigma = eig.values.mapv(|l| l.max(0.0).sqrt());
    Ok((sigma, eig.vectors))
}

/// Solves `A X = B` by LU with partial pivoting.
pub fn solve(a: &Array2<f64>, b: &Array2<f64>) -> Result<Array2<f64>> {
    let (n, m) = a.dim();
    if n != m || b.nrows() != n {
        return Err(Error::Shape(format!(
            "solve: A is {n}x{m}, B has {} rows",
            b.nrows()
        )));
    }
    let mut lu = a.to_owned();
    let mut x = b.to_owned();
    let scale = a.iter().fold(0.0f64, |s, v| s.max(v.abs())).max(f64::MIN_POSITIVE);
    for k in 0..n {
        let (piv, pmax) = (k..n)
            .map(|i| (i, lu[[i, k]].abs()))
            .max_by(|a, b| a.1.total_cmp(&b.1))
            .expect("non-empty range");
        if pmax <= 1e-13 * scale {
            return Err(Error::Numerical(format!(
                "solve: matrix is singular to working precision (pivot {pmax:e} at column {k})"
            )));
        }
        if piv != k {
            for j in 0..n {
                lu.swap([k, j], [piv, j]);
            }
            for j in 0..x.ncols() {
                x.swap([k, j], [piv, j]);
            }
        }
        let pivot = lu[[k, k]];
        for i in (k + 1)..n {
            let f = lu[[i, k]] / pivot;
            if f == 0.0 {
                continue;
            }
            lu[[i, k]] = f;
            for j in (k + 1)..n {
                lu[[i, j]] -= f * lu[[k, j]];
            }
            for j in 0..x.ncols() {
                x[[i, j]] -= f * x[[k, j]];
            }
        }
    }
    for k in (0..n).rev() {
        for j in 0..x.ncols() {
            let mut acc = x[[k, j]];
            for i in (k + 1)..n {
                acc -= lu[[k, i]] * x[[i, j]];
            }
            x[[k, j]] = acc / lu[[k, k]];
        }
    }
    Ok(x)
}

pub fn inverse(a: &Array2<f64>) -> Result<Array2<f64>> {
    solve(a, &Array2::<f64>::eye(a.nrows()))
}

/// Orthonormal basis for the column space of `a` (two-pass modified
/// Gram-Schmidt). Columns whose residual norm falls below `tol` times the
/// largest column norm are dropped.
pub fn orthonormal_basis(a: ArrayView2<f64>, tol: f64) -> Array2<f64> {
    let scale = a
        .columns()
        .into_iter()
        .map(|c| c.dot(&c).sqrt())
        .fold(0.0, f64::max);
    let mut basis: Vec<Array1<f64>> = Vec::new();
    for col in a.columns() {
        let mut v = col.to_owned();
        for _ in 0..2 {
            for q in &basis {
                let proj = q.dot(&v);
                v.scaled_add(-proj, q);
            }
        }
        let norm = v.dot(&v).sqrt();
        if norm > tol * scale && norm > 0.0 {
            basis.push(v / norm);
        }
    }
    let mut out = Array2::zeros((a.nrows(), basis.len()));
    for (j, q) in basis.iter().enumerate() {
        out.column_mut(j).assign(q);
    }
    out
}

fn spectral_norm(a: &Array2<f64>) -> Result<f64> {
    if a.is_empty() {
        return Ok(0.0);
    }
    let gram = if a.nrows() <= a.ncols() {
        a.dot(&a.t())
    } else {
        a.t().dot(a)
    };
    let gram = (&gram + &gram.t()) * 0.5;
    let eig = symmetric_eigen(&gram)?;
    Ok(eig.values.iter().fold(0.0f64, |m, v| m.max(*v)).max(0.0).sqrt())
}

/// Largest principal angle (radians) between the column spans of `a` and
/// `b`, computed through its sine `||(I - Q_a Q_a^T) Q_b||_2`, which stays
/// accurate for tiny angles. When the spans differ in dimension this
/// measures how far span(b) is from being contained in span(a).
pub fn largest_principal_angle(a: &Array2<f64>, b: &Array2<f64>) -> Result<f64> {
    if a.nrows() != b.nrows() {
        return Err(Error::Shape("principal angle: row counts differ".into()));
    }
    let qa = orthonormal_basis(a.view(), 1e-12);
    let qb = orthonormal_basis(b.view(), 1e-12);
    let residual = &qb - &qa.dot(&qa.t().dot(&qb));
    let sine = spectral_norm(&residual)?;
    Ok(sine.min(1.0).asin())
}

pub fn projector(basis: &Array2<f64>) -> Array2<f64> {
    let q = orthonormal_basis(basis.view(), 1e-12);
    q.dot(&q.t())
}

/// `||P_1 - P_2||_2` for the orthogonal projectors onto two column spans.
pub fn subspace_distance(a: &Array2<f64>, b: &Array2<f64>) -> Result<f64> {
    let diff = projector(a) - projector(b);
    let eig = symmetric_eigen(&((&diff + &diff.t()) * 0.5))?;
    Ok(eig.values.iter().fold(0.0f64, |m, v| m.max(v.abs())))
}

/// Leading `k` columns.
pub fn leading_columns(a: &Array2<f64>, k: usize) -> Array2<f64> {
    a.slice(s![.., ..k]).to_owned()
}

pub fn max_abs(a: &Array2<f64>) -> f64 {
    a.iter().fold(0.0f64, |m, v| m.max(v.abs()))
}
