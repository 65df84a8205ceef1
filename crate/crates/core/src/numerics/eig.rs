//! Symmetric eigensolves via cyclic Jacobi sweeps, and the 2-norm
//! logarithmic norm built on top of them.

use super::Matrix;
use crate::error::{Error, Result};

/// Relative asymmetry tolerated before an input is rejected as non-symmetric.
const SYMMETRY_RTOL: f64 = 1e-12;

fn check_symmetric(a: &Matrix) -> Result<()> {
    if !a.is_square() {
        return Err(Error::ContractViolation(format!(
            "symmetric eigensolve requires a square matrix, got {}x{}",
            a.rows(),
            a.cols()
        )));
    }
    let scale = a
        .row_iter_max()
        .max(f64::MIN_POSITIVE);
    for i in 0..a.rows() {
        for j in (i + 1)..a.cols() {
            if (a.get(i, j) - a.get(j, i)).abs() > SYMMETRY_RTOL * scale {
                return Err(Error::ContractViolation(format!(
                    "matrix asymmetric at ({i},{j}): {} vs {}",
                    a.get(i, j),
                    a.get(j, i)
                )));
            }
        }
    }
    Ok(())
}

impl Matrix {
    fn row_iter_max(&self) -> f64 {
        let mut m = 0.0f64;
        for i in 0..self.rows() {
            for &v in self.row(i) {
                m = m.max(v.abs());
            }
        }
        m
    }
}

/// Full symmetric eigendecomposition A = V diag(w) V^T by cyclic Jacobi
/// rotations. Returns (eigenvalues, V) with V's columns the eigenvectors,
/// unsorted. Intended for n <= 16.
pub fn sym_eig(a: &Matrix) -> Result<(Vec<f64>, Matrix)> {
    check_symmetric(a)?;
    let n = a.rows();
    if n == 0 {
        return Ok((Vec::new(), Matrix::zeros(0, 0)));
    }
    let mut s = a.clone();
    // symmetrize exactly so rounding in the input cannot leak through
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (s.get(i, j) + s.get(j, i));
            s.set(i, j, v);
            s.set(j, i, v);
        }
    }
    let mut v = Matrix::identity(n);
    let off = |m: &Matrix| -> f64 {
        let mut acc = 0.0;
        for i in 0..n {
            for j in (i + 1)..n {
                acc += m.get(i, j) * m.get(i, j);
            }
        }
        acc.sqrt()
    };
    let fro = s.frobenius_norm().max(f64::MIN_POSITIVE);
    for _sweep in 0..64 {
        if off(&s) <= 1e-15 * fro {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = s.get(p, q);
                if apq.abs() <= 1e-300 {
                    continue;
                }
                let app = s.get(p, p);
                let aqq = s.get(q, q);
                // classic two-sided Jacobi rotation
                let tau = (aqq - app) / (2.0 * apq);
                let t = if tau >= 0.0 {
                    1.0 / (tau + (1.0 + tau * tau).sqrt())
                } else {
                    -1.0 / (-tau + (1.0 + tau * tau).sqrt())
                };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let sn = t * c;
                for k in 0..n {
                    let skp = s.get(k, p);
                    let skq = s.get(k, q);
                    s.set(k, p, c * skp - sn * skq);
                    s.set(k, q, sn * skp + c * skq);
                }
                for k in 0..n {
                    let spk = s.get(p, k);
                    let sqk = s.get(q, k);
                    s.set(p, k, c * spk - sn * sqk);
                    s.set(q, k, sn * spk + c * sqk);
                }
                for k in 0..n {
                    let vkp = v.get(k, p);
                    let vkq = v.get(k, q);
                    v.set(k, p, c * vkp - sn * vkq);
                    v.set(k, q, sn * vkp + c * vkq);
                }
            }
        }
    }
    let w = (0..n).map(|i| s.get(i, i)).collect();
    Ok((w, v))
}

/// Largest eigenvalue of a symmetric matrix.
pub fn sym_eig_max(a: &Matrix) -> Result<f64> {
    let (w, _) = sym_eig(a)?;
    w.into_iter()
        .fold(None, |acc: Option<f64>, x| Some(acc.map_or(x, |m| m.max(x))))
        .ok_or_else(|| Error::ContractViolation("empty matrix has no eigenvalues".into()))
}

/// 2-norm logarithmic norm: mu(A) = lambda_max((A + A^T)/2).
///
/// Negativity certifies contraction of the flow of x' = A x in the
/// Euclidean norm.
pub fn log_norm_2(a: &Matrix) -> Result<f64> {
    if !a.is_square() {
        return Err(Error::ContractViolation(format!(
            "log norm requires a square matrix, got {}x{}",
            a.rows(),
            a.cols()
        )));
    }
    let sym = a.add(&a.transpose()).scale(0.5);
    sym_eig_max(&sym)
}
