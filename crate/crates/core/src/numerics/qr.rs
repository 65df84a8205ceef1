//! Householder QR with column pivoting; orthonormal nullspace bases.

use super::{Matrix, Vector};
use crate::error::{Error, Result};

/// Rank detection threshold relative to the largest pivot, a stand-in for a
/// singular-value cutoff at these dimensions.
const RANK_RTOL: f64 = 1e-10;

struct QrFactors {
    /// Full n x n accumulated Q.
    q: Matrix,
    /// Diagonal magnitudes of R in pivot order (descending).
    r_diag: Vec<f64>,
}

/// Householder QR of `a` (n x m, n >= m not required) with column pivoting,
/// accumulating the full orthogonal factor.
fn householder_qr(a: &Matrix) -> QrFactors {
    let n = a.rows();
    let m = a.cols();
    let mut r = a.clone();
    let mut q = Matrix::identity(n);
    let steps = n.min(m);
    let mut r_diag = Vec::with_capacity(steps);
    let mut perm: Vec<usize> = (0..m).collect();
    for k in 0..steps {
        // pivot on the remaining column with largest trailing norm
        let mut best_j = k;
        let mut best_norm = -1.0;
        for j in k..m {
            let mut s = 0.0;
            for i in k..n {
                let v = r.get(i, j);
                s += v * v;
            }
            if s > best_norm {
                best_norm = s;
                best_j = j;
            }
        }
        if best_j != k {
            for i in 0..n {
                let tmp = r.get(i, k);
                r.set(i, k, r.get(i, best_j));
                r.set(i, best_j, tmp);
            }
            perm.swap(k, best_j);
        }
        // Householder reflector for column k below the diagonal
        let mut x = vec![0.0; n - k];
        for i in k..n {
            x[i - k] = r.get(i, k);
        }
        let alpha = -x[0].signum() * x.iter().map(|v| v * v).sum::<f64>().sqrt();
        r_diag.push(alpha.abs());
        if alpha.abs() < 1e-300 {
            continue;
        }
        let mut v = x;
        v[0] -= alpha;
        let vnorm_sq: f64 = v.iter().map(|a| a * a).sum();
        if vnorm_sq < 1e-300 {
            continue;
        }
        // apply (I - 2 v v^T / v^T v) to R (left) and accumulate into Q
        for j in k..m {
            let mut dot = 0.0;
            for i in k..n {
                dot += v[i - k] * r.get(i, j);
            }
            let coef = 2.0 * dot / vnorm_sq;
            for i in k..n {
                let val = r.get(i, j) - coef * v[i - k];
                r.set(i, j, val);
            }
        }
        for j in 0..n {
            let mut dot = 0.0;
            for i in k..n {
                dot += v[i - k] * q.get(i, j);
            }
            let coef = 2.0 * dot / vnorm_sq;
            for i in k..n {
                let val = q.get(i, j) - coef * v[i - k];
                q.set(i, j, val);
            }
        }
    }
    // q currently holds the product of reflectors applied to I, i.e. Q^T
    QrFactors {
        q: q.transpose(),
        r_diag,
    }
}

/// Numerical rank from the pivoted R diagonal.
pub fn qr_rank(a: &Matrix) -> usize {
    let f = householder_qr(a);
    let max = f.r_diag.iter().cloned().fold(0.0f64, f64::max);
    if max <= 0.0 {
        return 0;
    }
    f.r_diag.iter().filter(|&&d| d > RANK_RTOL * max).count()
}

/// Orthonormal basis of ker(M^T) for a full-column-rank M (n x m, m <= n).
///
/// The basis spans Im(M)^perp, so M^T * result = 0. Built from the trailing
/// columns of the full Q factor of M. For m = n the result is n x 0.
pub fn nullspace_basis(m: &Matrix) -> Result<Matrix> {
    let n = m.rows();
    let mc = m.cols();
    if mc > n {
        return Err(Error::RankDeficient(format!(
            "{n}x{mc} matrix cannot have full column rank"
        )));
    }
    let f = householder_qr(m);
    let max = f.r_diag.iter().cloned().fold(0.0f64, f64::max);
    let rank = if max <= 0.0 {
        0
    } else {
        f.r_diag.iter().filter(|&&d| d > RANK_RTOL * max).count()
    };
    if rank < mc {
        return Err(Error::RankDeficient(format!(
            "rank {rank} < {mc} columns"
        )));
    }
    // columns mc..n of Q span ker(M^T)
    Ok(Matrix::from_fn(n, n - mc, |i, j| f.q.get(i, mc + j)))
}

#[allow(dead_code)]
pub(crate) fn column(mat: &Matrix, j: usize) -> Vector {
    mat.col(j)
}
