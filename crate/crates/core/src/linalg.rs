//! Small dense linear algebra: symmetric pseudo-inverse and least squares with
//! collinear-column dropping.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

/// Singular values below this fraction of the largest are treated as zero.
pub const PINV_RELATIVE_CUTOFF: f64 = 1e-10;

#[derive(Clone, Debug)]
pub struct SymmetricPinv {
    pub pinv: DMatrix<f64>,
    pub rank: usize,
    /// Smallest eigenvalue is negative beyond the cutoff.
    pub indefinite: bool,
    pub min_eigenvalue: f64,
    pub max_abs_eigenvalue: f64,
}

/// Moore–Penrose inverse of `(A + Aᵀ)/2` via its eigendecomposition.
pub fn symmetric_pinv(a: &DMatrix<f64>) -> SymmetricPinv {
    let k = a.nrows();
    assert_eq!(k, a.ncols(), "square matrix required");
    if k == 0 {
        return SymmetricPinv {
            pinv: DMatrix::zeros(0, 0),
            rank: 0,
            indefinite: false,
            min_eigenvalue: 0.0,
            max_abs_eigenvalue: 0.0,
        };
    }
    let sym = (a + a.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let max_abs = eig.eigenvalues.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let min_ev = eig.eigenvalues.iter().copied().fold(f64::INFINITY, f64::min);
    let tol = PINV_RELATIVE_CUTOFF * max_abs;
    let mut pinv = DMatrix::zeros(k, k);
    let mut rank = 0;
    for (idx, &lambda) in eig.eigenvalues.iter().enumerate() {
        if lambda.abs() > tol && lambda != 0.0 {
            rank += 1;
            let v = eig.eigenvectors.column(idx);
            pinv += (v * v.transpose()) / lambda;
        }
    }
    SymmetricPinv {
        pinv,
        rank,
        indefinite: min_ev < -tol,
        min_eigenvalue: min_ev,
        max_abs_eigenvalue: max_abs,
    }
}

#[derive(Clone, Debug)]
pub struct LeastSquares {
    /// One coefficient per design column; dropped columns get 0.
    pub coefficients: Vec<f64>,
    pub dropped: Vec<usize>,
}

/// Ordinary least squares by modified Gram–Schmidt.
///
/// A column whose residual norm after projecting out the kept columns falls
/// below `1e-10` of its own norm is dropped.
pub fn least_squares(design: &[Vec<f64>], target: &[f64]) -> LeastSquares {
    let n = target.len();
    let p = design.first().map_or(0, Vec::len);
    let mut q: Vec<DVector<f64>> = Vec::new();
    let mut kept: Vec<usize> = Vec::new();
    let mut dropped = Vec::new();
    // r_rows[k][s]: entry (k, s) of R over kept-column slots
    let mut r_rows: Vec<Vec<f64>> = Vec::new();
    for c in 0..p {
        let col = DVector::from_iterator(n, design.iter().map(|row| row[c]));
        let norm0 = col.norm();
        let mut v = col.clone();
        let mut coefs = Vec::with_capacity(q.len());
        for qk in &q {
            let rk = qk.dot(&v);
            v -= qk * rk;
            coefs.push(rk);
        }
        let norm = v.norm();
        if norm0 == 0.0 || norm <= 1e-10 * norm0 {
            dropped.push(c);
            continue;
        }
        for (k, rk) in coefs.into_iter().enumerate() {
            r_rows[k].push(rk);
        }
        let mut diag_row = vec![0.0; kept.len()];
        diag_row.push(norm);
        r_rows.push(diag_row);
        q.push(v / norm);
        kept.push(c);
    }
    let k = kept.len();
    let y = DVector::from_column_slice(target);
    let qty: Vec<f64> = q.iter().map(|qk| qk.dot(&y)).collect();
    // Back substitution on the k×k upper-triangular R.
    let mut beta = vec![0.0; k];
    for i in (0..k).rev() {
        let mut s = qty[i];
        for j in (i + 1)..k {
            s -= r_rows[i][j] * beta[j];
        }
        beta[i] = s / r_rows[i][i];
    }
    let mut coefficients = vec![0.0; p];
    for (slot, &c) in kept.iter().enumerate() {
        coefficients[c] = beta[slot];
    }
    LeastSquares {
        coefficients,
        dropped,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pinv_of_singular_diagonal() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 0.0]);
        let p = symmetric_pinv(&a);
        assert_eq!(p.rank, 1);
        assert!((p.pinv[(0, 0)] - 1.0).abs() < 1e-15);
        assert_eq!(p.pinv[(1, 1)], 0.0);
        assert!(!p.indefinite);
    }

    #[test]
    fn pinv_inverts_spd() {
        let a = DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 1.0, 3.0]);
        let p = symmetric_pinv(&a);
        let id = &a * &p.pinv;
        assert!((id - DMatrix::identity(2, 2)).norm() < 1e-12);
    }

    #[test]
    fn pinv_flags_indefinite() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]);
        assert!(symmetric_pinv(&a).indefinite);
    }

    #[test]
    fn least_squares_recovers_exact_fit() {
        let design: Vec<Vec<f64>> = (0..10).map(|i| vec![1.0, i as f64]).collect();
        let target: Vec<f64> = (0..10).map(|i| 2.0 - 0.5 * i as f64).collect();
        let fit = least_squares(&design, &target);
        assert!(fit.dropped.is_empty());
        assert!((fit.coefficients[0] - 2.0).abs() < 1e-12);
        assert!((fit.coefficients[1] + 0.5).abs() < 1e-12);
    }

    #[test]
    fn least_squares_drops_collinear_column() {
        let design: Vec<Vec<f64>> = (0..6)
            .map(|i| vec![1.0, i as f64, 2.0 * i as f64, (i * i) as f64])
            .collect();
        let target: Vec<f64> = (0..6).map(|i| 1.0 + (i * i) as f64).collect();
        let fit = least_squares(&design, &target);
        assert_eq!(fit.dropped, vec![2]);
        let pred: Vec<f64> = design
            .iter()
            .map(|r| r.iter().zip(&fit.coefficients).map(|(a, b)| a * b).sum())
            .collect();
        for (p, t) in pred.iter().zip(&target) {
            assert!((p - t).abs() < 1e-10);
        }
    }
}
