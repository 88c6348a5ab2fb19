//! Dense kernels used by the outcome models and the linear-confounder projection.
//!
//! Everything operates on row-major `Array2` values; inputs that are not in
//! standard layout are copied first.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};

use crate::error::{EfcError, Result};
use crate::scalar::Scalar;

#[inline]
pub(crate) fn dot<F: Scalar>(a: &[F], b: &[F]) -> F {
    let mut acc = F::zero();
    for (x, y) in a.iter().zip(b) {
        acc += *x * *y;
    }
    acc
}

/// Lower-triangular Cholesky factor of a symmetric positive-definite matrix.
#[derive(Debug, Clone)]
pub struct Cholesky<F> {
    n: usize,
    lower: Vec<F>,
}

impl<F: Scalar> Cholesky<F> {
    pub fn factor(a: ArrayView2<'_, F>) -> Result<Self> {
        let (n, m) = a.dim();
        if n != m {
            return Err(EfcError::DimensionMismatch { expected: n, found: m });
        }
        let mut l: Vec<F> = a.iter().copied().collect();
        for i in 0..n {
            let (done, rest) = l.split_at_mut(i * n);
            let row_i = &mut rest[..n];
            for j in 0..i {
                let row_j = &done[j * n..j * n + n];
                let s = row_i[j] - dot(&row_i[..j], &row_j[..j]);
                row_i[j] = s / row_j[j];
            }
            let d = row_i[i] - dot(&row_i[..i], &row_i[..i]);
            if !(d > F::zero()) || !d.is_finite() {
                return Err(EfcError::NumericalFailure(format!(
                    "matrix is not positive definite (pivot {i} = {d:e})"
                )));
            }
            row_i[i] = d.sqrt();
            for x in row_i[i + 1..].iter_mut() {
                *x = F::zero();
            }
        }
        Ok(Self { n, lower: l })
    }

    pub fn solve(&self, b: ArrayView1<'_, F>) -> Result<Array1<F>> {
        let n = self.n;
        if b.len() != n {
            return Err(EfcError::DimensionMismatch { expected: n, found: b.len() });
        }
        let l = &self.lower;
        let mut x: Vec<F> = b.iter().copied().collect();
        // L y = b
        for i in 0..n {
            let s = x[i] - dot(&l[i * n..i * n + i], &x[..i]);
            x[i] = s / l[i * n + i];
        }
        // L^T x = y
        for i in (0..n).rev() {
            let mut s = x[i];
            for k in i + 1..n {
                s -= l[k * n + i] * x[k];
            }
            x[i] = s / l[i * n + i];
        }
        Ok(Array1::from(x))
    }
}

/// Eigen-decomposition of a symmetric matrix, eigenvalues sorted descending.
#[derive(Debug, Clone)]
pub struct SymmetricEigen<F> {
    pub values: Array1<F>,
    /// Eigenvectors stored as columns, aligned with `values`.
    pub vectors: Array2<F>,
}

/// Cyclic Jacobi eigenvalue iteration.
pub fn symmetric_eigen<F: Scalar>(a: ArrayView2<'_, F>) -> Result<SymmetricEigen<F>> {
    let (n, m) = a.dim();
    if n != m {
        return Err(EfcError::DimensionMismatch { expected: n, found: m });
    }
    let mut w: Vec<F> = a.iter().copied().collect();
    let mut v = vec![F::zero(); n * n];
    for i in 0..n {
        v[i * n + i] = F::one();
    }
    let frob2: F = w.iter().map(|x| *x * *x).sum();
    let scale = F::epsilon() * F::from_usize_lossy(n.max(1));
    let tol = scale * scale * frob2;
    let mut converged = n < 2;
    for _sweep in 0..100 {
        let mut off = F::zero();
        for p in 0..n {
            for q in p + 1..n {
                off += w[p * n + q] * w[p * n + q];
            }
        }
        if off <= tol {
            converged = true;
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = w[p * n + q];
                if apq == F::zero() {
                    continue;
                }
                let app = w[p * n + p];
                let aqq = w[q * n + q];
                let theta = (aqq - app) / (apq + apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + F::one()).sqrt());
                let c = F::one() / (t * t + F::one()).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = w[k * n + p];
                    let akq = w[k * n + q];
                    w[k * n + p] = c * akp - s * akq;
                    w[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = w[p * n + k];
                    let aqk = w[q * n + k];
                    w[p * n + k] = c * apk - s * aqk;
                    w[q * n + k] = s * apk + c * aqk;
                }
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
        return Err(EfcError::NumericalFailure(
            "Jacobi eigen iteration did not converge".into(),
        ));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| {
        w[j * n + j]
            .partial_cmp(&w[i * n + i])
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let values = Array1::from_iter(order.iter().map(|&i| w[i * n + i]));
    let mut vectors = Array2::zeros((n, n));
    for (col, &src) in order.iter().enumerate() {
        for k in 0..n {
            vectors[[k, col]] = v[k * n + src];
        }
    }
    Ok(SymmetricEigen { values, vectors })
}

/// Thin singular value decomposition `A = U diag(s) V^T`, singular values descending.
#[derive(Debug, Clone)]
pub struct ThinSvd<F> {
    #[cfg_attr(not(test), allow(dead_code))]
    pub u: Array2<F>,
    pub s: Array1<F>,
    pub v: Array2<F>,
}

/// Thin SVD through the eigendecomposition of the smaller Gram matrix. Singular directions
/// with a zero singular value are returned as zero columns on the derived side.
pub fn thin_svd<F: Scalar>(a: ArrayView2<'_, F>) -> Result<ThinSvd<F>> {
    let (n, m) = a.dim();
    let wide = n < m;
    let g = if wide { gram(a.t()) } else { gram(a) };
    let eig = symmetric_eigen(g.view())?;
    let s = eig.values.mapv(|x| x.max(F::zero()).sqrt());
    // Singular values below this are treated as exact zeros.
    let floor = s.first().copied().unwrap_or(F::zero()) * F::epsilon() * F::from_usize_lossy(n.max(m));
    let known = eig.vectors;
    let mut other = if wide { a.t().dot(&known) } else { a.dot(&known) };
    for (j, mut col) in other.columns_mut().into_iter().enumerate() {
        if s[j] > floor {
            col.mapv_inplace(|x| x / s[j]);
        } else {
            col.fill(F::zero());
        }
    }
    if s.iter().any(|x| !x.is_finite()) || other.iter().any(|x| !x.is_finite()) {
        return Err(EfcError::SvdFailure("non-finite singular vectors".into()));
    }
    Ok(if wide { ThinSvd { u: known, s, v: other } } else { ThinSvd { u: other, s, v: known } })
}

/// `A^T A` for a row-major matrix.
pub fn gram<F: Scalar>(a: ArrayView2<'_, F>) -> Array2<F> {
    let (rows, cols) = a.dim();
    let mut g = Array2::<F>::zeros((cols, cols));
    for r in 0..rows {
        let row = a.row(r);
        for i in 0..cols {
            let ri = row[i];
            if ri == F::zero() {
                continue;
            }
            for j in i..cols {
                g[[i, j]] += ri * row[j];
            }
        }
    }
    for i in 0..cols {
        for j in 0..i {
            g[[i, j]] = g[[j, i]];
        }
    }
    g
}

/// Ratio of extreme eigenvalues of a symmetric positive semi-definite matrix.
pub fn condition_number<F: Scalar>(a: ArrayView2<'_, F>) -> Result<F> {
    let eig = symmetric_eigen(a)?;
    let n = eig.values.len();
    if n == 0 {
        return Ok(F::one());
    }
    let max = eig.values[0];
    let min = eig.values[n - 1];
    if !(min > F::zero()) {
        return Ok(F::infinity());
    }
    Ok(max / min)
}
