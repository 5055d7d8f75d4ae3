//! Small dense symmetric positive-definite helpers for the analytic
//! linear-Gaussian oracle (d ≤ a few dozen).

use crate::error::{Error, Result};

/// Square matrix stored row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix {
    pub n: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn identity(n: usize) -> Self {
        let mut data = vec![0.0; n * n];
        for i in 0..n {
            data[i * n + i] = 1.0;
        }
        Self { n, data }
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n + j]
    }
}

/// Lower-triangular Cholesky factor `L` with `L·Lᵀ = A`.
pub fn cholesky(a: &Matrix) -> Result<Matrix> {
    let n = a.n;
    let mut l = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            let mut s = a.at(i, j);
            for k in 0..j {
                s -= l[i * n + k] * l[j * n + k];
            }
            if i == j {
                if s.is_nan() || s <= 0.0 {
                    return Err(Error::NotPositiveDefinite);
                }
                l[i * n + i] = s.sqrt();
            } else {
                l[i * n + j] = s / l[j * n + j];
            }
        }
    }
    Ok(Matrix { n, data: l })
}

/// Solve `L·Lᵀ·x = b` given the Cholesky factor.
pub fn cholesky_solve(l: &Matrix, b: &[f64]) -> Vec<f64> {
    let n = l.n;
    let mut y = b.to_vec();
    for i in 0..n {
        for k in 0..i {
            y[i] -= l.at(i, k) * y[k];
        }
        y[i] /= l.at(i, i);
    }
    for i in (0..n).rev() {
        for k in i + 1..n {
            y[i] -= l.at(k, i) * y[k];
        }
        y[i] /= l.at(i, i);
    }
    y
}

/// `log det A` from its Cholesky factor.
pub fn cholesky_log_det(l: &Matrix) -> f64 {
    (0..l.n).map(|i| 2.0 * l.at(i, i).ln()).sum()
}

/// Inverse of an SPD matrix.
pub fn spd_inverse(a: &Matrix) -> Result<Matrix> {
    let l = cholesky(a)?;
    let n = a.n;
    let mut inv = vec![0.0; n * n];
    for j in 0..n {
        let mut e = vec![0.0; n];
        e[j] = 1.0;
        let col = cholesky_solve(&l, &e);
        for i in 0..n {
            inv[i * n + j] = col[i];
        }
    }
    Ok(Matrix { n, data: inv })
}

/// Log density of `N(x | mean, cov)`.
pub fn gaussian_log_density(x: &[f64], mean: &[f64], cov: &Matrix) -> Result<f64> {
    let l = cholesky(cov)?;
    let diff: Vec<f64> = x.iter().zip(mean).map(|(a, b)| a - b).collect();
    let sol = cholesky_solve(&l, &diff);
    let quad: f64 = diff.iter().zip(&sol).map(|(a, b)| a * b).sum();
    let d = x.len() as f64;
    Ok(-0.5 * quad - 0.5 * cholesky_log_det(&l) - 0.5 * d * (2.0 * std::f64::consts::PI).ln())
}
