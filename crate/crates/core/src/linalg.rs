//! Weighted least squares on small dense designs.

use nalgebra::{DMatrix, DVector};

/// Smallest admissible squared Cholesky pivot of the equilibrated Gram matrix.
/// A pivot equals `1 - R^2` of that column on the preceding ones.
pub const COLLINEARITY_TOL: f64 = 1e-11;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Singular {
    /// Design column whose pivot fell below tolerance.
    pub column: usize,
}

/// `X' W X` for a row-major design given as an `n x k` matrix.
pub fn weighted_gram(x: &DMatrix<f64>, w: &[f64]) -> DMatrix<f64> {
    let mut xw = x.clone();
    for (i, wi) in w.iter().enumerate() {
        xw.row_mut(i).scale_mut(*wi);
    }
    x.transpose() * xw
}

/// Inverse of a symmetric positive-definite Gram matrix, rejecting
/// numerically collinear columns.
pub fn gram_inverse(gram: &DMatrix<f64>) -> Result<DMatrix<f64>, Singular> {
    let k = gram.nrows();
    let mut scale = DVector::zeros(k);
    for j in 0..k {
        let d = gram[(j, j)];
        if !(d > 0.0 && d.is_finite()) {
            return Err(Singular { column: j });
        }
        scale[j] = 1.0 / d.sqrt();
    }
    let scaled = DMatrix::from_fn(k, k, |i, j| gram[(i, j)] * scale[i] * scale[j]);
    let chol = nalgebra::linalg::Cholesky::new(scaled).ok_or_else(|| Singular {
        column: first_weak_pivot(gram, &scale),
    })?;
    let l = chol.l_dirty();
    if let Some(j) = (0..k).find(|&j| l[(j, j)] * l[(j, j)] < COLLINEARITY_TOL) {
        return Err(Singular { column: j });
    }
    let inv = chol.inverse();
    Ok(DMatrix::from_fn(k, k, |i, j| inv[(i, j)] * scale[i] * scale[j]))
}

// Locates the failing column when nalgebra's factorisation aborts.
fn first_weak_pivot(gram: &DMatrix<f64>, scale: &DVector<f64>) -> usize {
    let k = gram.nrows();
    for m in 1..=k {
        let sub = DMatrix::from_fn(m, m, |i, j| gram[(i, j)] * scale[i] * scale[j]);
        match nalgebra::linalg::Cholesky::new(sub) {
            Some(c) => {
                let l = c.l_dirty();
                if l[(m - 1, m - 1)] * l[(m - 1, m - 1)] < COLLINEARITY_TOL {
                    return m - 1;
                }
            }
            None => return m - 1,
        }
    }
    k - 1
}

#[derive(Debug, Clone)]
pub struct WlsFit {
    pub coef: DVector<f64>,
    /// `(X' W X)^{-1}`.
    pub gram_inv: DMatrix<f64>,
}

pub fn wls(x: &DMatrix<f64>, y: &[f64], w: &[f64]) -> Result<WlsFit, Singular> {
    let gram_inv = gram_inverse(&weighted_gram(x, w))?;
    let mut xty = DVector::zeros(x.ncols());
    for i in 0..x.nrows() {
        let wy = w[i] * y[i];
        for j in 0..x.ncols() {
            xty[j] += x[(i, j)] * wy;
        }
    }
    Ok(WlsFit {
        coef: &gram_inv * xty,
        gram_inv,
    })
}

/// Ordinary least squares with unit weights.
pub fn ols(x: &DMatrix<f64>, y: &[f64]) -> Result<WlsFit, Singular> {
    wls(x, y, &vec![1.0; y.len()])
}

/// Solves a small SPD system in place by Cholesky. Returns `false` when a
/// pivot falls below `rel_tol` times the corresponding diagonal entry.
pub fn solve_spd_small(a: &mut [f64], b: &mut [f64], n: usize, rel_tol: f64) -> bool {
    for j in 0..n {
        let diag0 = a[j * n + j];
        let mut d = diag0;
        for k in 0..j {
            d -= a[j * n + k] * a[j * n + k];
        }
        if !(d > rel_tol * diag0.abs()) || !d.is_finite() {
            return false;
        }
        let d = d.sqrt();
        a[j * n + j] = d;
        for i in (j + 1)..n {
            let mut s = a[i * n + j];
            for k in 0..j {
                s -= a[i * n + k] * a[j * n + k];
            }
            a[i * n + j] = s / d;
        }
    }
    for i in 0..n {
        let mut s = b[i];
        for k in 0..i {
            s -= a[i * n + k] * b[k];
        }
        b[i] = s / a[i * n + i];
    }
    for i in (0..n).rev() {
        let mut s = b[i];
        for k in (i + 1)..n {
            s -= a[k * n + i] * b[k];
        }
        b[i] = s / a[i * n + i];
    }
    true
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_line_recovered() {
        let x = DMatrix::from_fn(5, 2, |i, j| if j == 0 { 1.0 } else { i as f64 });
        let y: Vec<f64> = (0..5).map(|i| 3.0 - 0.5 * i as f64).collect();
        let fit = ols(&x, &y).unwrap();
        assert!((fit.coef[0] - 3.0).abs() < 1e-12);
        assert!((fit.coef[1] + 0.5).abs() < 1e-12);
    }

    #[test]
    fn duplicate_column_is_singular() {
        let x = DMatrix::from_fn(6, 3, |i, j| match j {
            0 => 1.0,
            1 => i as f64,
            _ => 2.0,
        });
        let err = ols(&x, &[0.0; 6]).unwrap_err();
        assert_eq!(err.column, 2);
    }

    #[test]
    fn small_spd_solver() {
        let mut a = vec![4.0, 2.0, 2.0, 3.0];
        let mut b = vec![2.0, 1.0];
        assert!(solve_spd_small(&mut a, &mut b, 2, 1e-12));
        assert!((b[0] - 0.5).abs() < 1e-14 && b[1].abs() < 1e-14);
        let mut s = vec![1.0, 1.0, 1.0, 1.0];
        assert!(!solve_spd_small(&mut s, &mut [1.0, 1.0], 2, 1e-12));
    }
}
