//! Small dense linear algebra: inverse, determinant, singular values.

use super::tensor::Tensor;
use crate::error::{shape_err, Error, Result};

fn square(a: &Tensor, what: &str) -> Result<usize> {
    let (m, n) = a.expect_matrix(what)?;
    if m != n {
        return Err(shape_err(format!("{what}: matrix is {m}x{n}, not square")));
    }
    Ok(n)
}

/// Gauss-Jordan inverse with partial pivoting.
pub fn inverse(a: &Tensor) -> Result<Tensor> {
    let n = square(a, "inverse")?;
    let mut m = a.data().to_vec();
    let mut inv = Tensor::eye(n).into_data();
    for col in 0..n {
        let pivot = (col..n).max_by(|&i, &j| m[i * n + col].abs().total_cmp(&m[j * n + col].abs())).unwrap_or(col);
        let pv = m[pivot * n + col];
        if pv.abs() < 1e-300 {
            return Err(Error::Numeric("matrix is singular".into()));
        }
        if pivot != col {
            for j in 0..n {
                m.swap(col * n + j, pivot * n + j);
                inv.swap(col * n + j, pivot * n + j);
            }
        }
        for j in 0..n {
            m[col * n + j] /= pv;
            inv[col * n + j] /= pv;
        }
        for r in 0..n {
            if r == col {
                continue;
            }
            let f = m[r * n + col];
            if f == 0.0 {
                continue;
            }
            for j in 0..n {
                m[r * n + j] -= f * m[col * n + j];
                inv[r * n + j] -= f * inv[col * n + j];
            }
        }
    }
    if inv.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("inverse overflowed".into()));
    }
    Ok(Tensor::from_parts(vec![n, n], inv))
}

/// Determinant by LU elimination with partial pivoting.
pub fn det(a: &Tensor) -> Result<f64> {
    let n = square(a, "det")?;
    let mut m = a.data().to_vec();
    let mut det = 1.0;
    for col in 0..n {
        let pivot = (col..n).max_by(|&i, &j| m[i * n + col].abs().total_cmp(&m[j * n + col].abs())).unwrap_or(col);
        let pv = m[pivot * n + col];
        if pv == 0.0 {
            return Ok(0.0);
        }
        if pivot != col {
            for j in 0..n {
                m.swap(col * n + j, pivot * n + j);
            }
            det = -det;
        }
        det *= pv;
        for r in col + 1..n {
            let f = m[r * n + col] / pv;
            for j in col..n {
                m[r * n + j] -= f * m[col * n + j];
            }
        }
    }
    Ok(det)
}

/// Singular values in descending order, by one-sided Jacobi rotations.
pub fn singular_values(a: &Tensor) -> Result<Vec<f64>> {
    let (rows, cols) = a.expect_matrix("singular_values")?;
    // Work on the orientation with at least as many rows as columns.
    let (m, n, mut w) =
        if rows >= cols { (rows, cols, a.data().to_vec()) } else { (cols, rows, a.transpose()?.into_data()) };
    for _sweep in 0..60 {
        let mut rotated = false;
        for p in 0..n {
            for q in p + 1..n {
                let (mut alpha, mut beta, mut gamma) = (0.0, 0.0, 0.0);
                for i in 0..m {
                    let (x, y) = (w[i * n + p], w[i * n + q]);
                    alpha += x * x;
                    beta += y * y;
                    gamma += x * y;
                }
                if gamma.abs() <= 1e-15 * (alpha * beta).sqrt() || gamma == 0.0 {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let t = if zeta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for i in 0..m {
                    let (x, y) = (w[i * n + p], w[i * n + q]);
                    w[i * n + p] = c * x - s * y;
                    w[i * n + q] = s * x + c * y;
                }
            }
        }
        if !rotated {
            break;
        }
    }
    let mut sv: Vec<f64> = (0..n).map(|j| (0..m).map(|i| w[i * n + j] * w[i * n + j]).sum::<f64>().sqrt()).collect();
    sv.sort_by(|a, b| b.total_cmp(a));
    Ok(sv)
}
