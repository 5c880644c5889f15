//! Small dense linear-algebra helpers on top of nalgebra.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{FlcmError, Result};

pub(crate) const CHOLESKY_JITTER: f64 = 1e-10;

pub fn max_abs(m: &DMatrix<f64>) -> f64 {
    m.iter().fold(0.0_f64, |acc, v| acc.max(v.abs()))
}

/// Lower Cholesky factor of a symmetric positive definite matrix.
///
/// On failure a ridge of `1e-10 * trace / k` is added and the factorization is
/// retried once. The returned flag reports whether the ridge was needed.
pub fn cholesky_with_jitter(k: &DMatrix<f64>) -> Result<(DMatrix<f64>, bool)> {
    if let Some(ch) = k.clone().cholesky() {
        return Ok((ch.l(), false));
    }
    let n = k.nrows().max(1) as f64;
    let eps = CHOLESKY_JITTER * k.trace().abs() / n;
    let mut jittered = k.clone();
    for i in 0..k.nrows() {
        jittered[(i, i)] += eps;
    }
    jittered
        .cholesky()
        .map(|ch| (ch.l(), true))
        .ok_or_else(|| {
            let eig = SymmetricEigen::new(k.clone()).eigenvalues;
            let min = eig.iter().cloned().fold(f64::INFINITY, f64::min);
            FlcmError::Numerical(format!(
                "Cholesky failed after jitter {eps:.3e}; smallest eigenvalue {min:.3e}, trace {:.3e}",
                k.trace()
            ))
        })
}

/// Symmetric inverse square root with eigenvalues floored at `floor_rel * max`.
///
/// Returns the matrix and the number of eigenvalues that hit the floor.
pub fn sym_inv_sqrt(s: &DMatrix<f64>, floor_rel: f64) -> Result<(DMatrix<f64>, usize)> {
    let sym = (s + s.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let max = eig.eigenvalues.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !(max > 0.0) || !max.is_finite() {
        return Err(FlcmError::Numerical(
            "covariance has no positive eigenvalue".into(),
        ));
    }
    let floor = floor_rel * max;
    let mut floored = 0;
    let scaled: DVector<f64> = eig.eigenvalues.map(|l| {
        if l < floor {
            floored += 1;
            1.0 / floor.sqrt()
        } else {
            1.0 / l.sqrt()
        }
    });
    let v = &eig.eigenvectors;
    let mut vs = v.clone();
    for (j, mut col) in vs.column_iter_mut().enumerate() {
        col *= scaled[j];
    }
    Ok((&vs * v.transpose(), floored))
}

/// Eigen-decomposition sorted by decreasing eigenvalue.
pub fn sorted_eigen(m: DMatrix<f64>) -> (Vec<f64>, DMatrix<f64>) {
    let n = m.nrows();
    let eig = SymmetricEigen::new(m);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let values = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let vectors = DMatrix::from_fn(n, n, |r, c| eig.eigenvectors[(r, order[c])]);
    (values, vectors)
}

/// Solves `A x = b` for symmetric positive semi-definite `A` with a relative ridge.
pub fn ridge_solve(a: &DMatrix<f64>, b: &DVector<f64>, ridge_rel: f64) -> Result<DVector<f64>> {
    let n = a.nrows();
    let mean_diag = if n == 0 { 0.0 } else { a.trace() / n as f64 };
    let mut reg = a.clone();
    let ridge = ridge_rel * mean_diag.max(f64::MIN_POSITIVE);
    for i in 0..n {
        reg[(i, i)] += ridge;
    }
    let (l, _) = cholesky_with_jitter(&reg)?;
    let y = l
        .solve_lower_triangular(b)
        .ok_or_else(|| FlcmError::Numerical("singular triangular factor".into()))?;
    l.tr_solve_lower_triangular(&y)
        .ok_or_else(|| FlcmError::Numerical("singular triangular factor".into()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn inverse_square_root_whitens() {
        let a = DMatrix::from_row_slice(3, 3, &[4.0, 1.0, 0.5, 1.0, 3.0, 0.2, 0.5, 0.2, 2.0]);
        let (w, floored) = sym_inv_sqrt(&a, 1e-8).unwrap();
        assert_eq!(floored, 0);
        let id = &w * &a * &w;
        assert!(max_abs(&(id - DMatrix::identity(3, 3))) < 1e-12);
    }

    #[test]
    fn floors_tiny_eigenvalues() {
        let a = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 1e-12]));
        let (w, floored) = sym_inv_sqrt(&a, 1e-8).unwrap();
        assert_eq!(floored, 1);
        assert!((w[(1, 1)] - 1e4).abs() < 1e-6);
    }

    #[test]
    fn jitter_rescues_semidefinite_matrix() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        let (l, jittered) = cholesky_with_jitter(&a).unwrap();
        assert!(jittered);
        assert!(max_abs(&(&l * l.transpose() - a)) < 1e-8);
    }

    #[test]
    fn indefinite_matrix_is_reported() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]);
        assert!(matches!(cholesky_with_jitter(&a), Err(FlcmError::Numerical(_))));
    }
}
