//! Small dense least-squares and symmetric solves.

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LinalgError {
    #[error("rank-deficient design: collinear columns [{}]", .0.join(", "))]
    Collinear(Vec<String>),
    #[error("matrix is not positive definite")]
    NotPositiveDefinite,
    #[error("dimension mismatch: {0}")]
    Dimension(String),
}

/// Result of an ordinary least-squares fit.
#[derive(Debug, Clone)]
pub struct OlsFit {
    pub coef: Vec<f64>,
    pub residuals: Vec<f64>,
    pub rss: f64,
}

/// Least squares for a column-major design via modified Gram-Schmidt.
///
/// A column whose component orthogonal to the earlier columns has norm below
/// `1e-9` times its original norm is reported together with every earlier
/// column it loads on.
pub fn ols(columns: &[Vec<f64>], names: &[String], y: &[f64]) -> Result<OlsFit, LinalgError> {
    let p = columns.len();
    let n = y.len();
    if names.len() != p {
        return Err(LinalgError::Dimension("names vs columns".into()));
    }
    if columns.iter().any(|c| c.len() != n) {
        return Err(LinalgError::Dimension("column length differs from response".into()));
    }
    let mut q: Vec<Vec<f64>> = Vec::with_capacity(p);
    let mut r = vec![vec![0.0; p]; p];
    for (j, col) in columns.iter().enumerate() {
        let orig = norm(col);
        let mut v = col.clone();
        for (i, qi) in q.iter().enumerate() {
            let d = dot(qi, &v);
            r[i][j] = d;
            axpy(-d, qi, &mut v);
        }
        let nv = norm(&v);
        if orig == 0.0 || nv <= 1e-9 * orig {
            let mut culprits: Vec<String> = (0..j)
                .filter(|&i| r[i][j].abs() > 1e-9 * orig.max(1.0))
                .map(|i| names[i].clone())
                .collect();
            culprits.push(names[j].clone());
            return Err(LinalgError::Collinear(culprits));
        }
        r[j][j] = nv;
        v.iter_mut().for_each(|x| *x /= nv);
        q.push(v);
    }
    let qty: Vec<f64> = q.iter().map(|qi| dot(qi, y)).collect();
    let mut coef = vec![0.0; p];
    for j in (0..p).rev() {
        let s: f64 = ((j + 1)..p).map(|k| r[j][k] * coef[k]).sum();
        coef[j] = (qty[j] - s) / r[j][j];
    }
    let mut residuals = y.to_vec();
    for (j, col) in columns.iter().enumerate() {
        axpy(-coef[j], col, &mut residuals);
    }
    let rss = dot(&residuals, &residuals);
    Ok(OlsFit { coef, residuals, rss })
}

/// Solves `A x = b` for symmetric positive-definite `A` (row-major, d×d).
pub fn cholesky_solve(a: &[f64], b: &[f64], d: usize) -> Result<Vec<f64>, LinalgError> {
    if a.len() != d * d || b.len() != d {
        return Err(LinalgError::Dimension("cholesky input".into()));
    }
    let mut l = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..=i {
            let mut s = a[i * d + j];
            for k in 0..j {
                s -= l[i * d + k] * l[j * d + k];
            }
            if i == j {
                if s <= 0.0 || !s.is_finite() {
                    return Err(LinalgError::NotPositiveDefinite);
                }
                l[i * d + i] = s.sqrt();
            } else {
                l[i * d + j] = s / l[j * d + j];
            }
        }
    }
    let mut z = vec![0.0; d];
    for i in 0..d {
        let s: f64 = (0..i).map(|k| l[i * d + k] * z[k]).sum();
        z[i] = (b[i] - s) / l[i * d + i];
    }
    let mut x = vec![0.0; d];
    for i in (0..d).rev() {
        let s: f64 = ((i + 1)..d).map(|k| l[k * d + i] * x[k]).sum();
        x[i] = (z[i] - s) / l[i * d + i];
    }
    Ok(x)
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

#[inline]
fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}
