//! Small dense linear-algebra helpers shared across the pipeline stages.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Ratio of largest to smallest eigenvalue of a symmetric matrix.
/// Returns infinity when the smallest eigenvalue is not positive.
pub fn condition_number_sym(m: &DMatrix<f64>) -> f64 {
    let eig = m.clone().symmetric_eigenvalues();
    let max = eig.max();
    let min = eig.min();
    if min <= 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

pub fn min_eigenvalue_sym(m: &DMatrix<f64>) -> f64 {
    m.clone().symmetric_eigenvalues().min()
}

/// Inverse of a symmetric positive-definite matrix via Cholesky.
pub fn spd_inverse(m: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let inv = m.clone().cholesky()?.inverse();
    Some(symmetrize(inv))
}

/// `ln det` of a symmetric positive-definite matrix.
pub fn spd_log_det(m: &DMatrix<f64>) -> Option<f64> {
    let chol = m.clone().cholesky()?;
    Some(2.0 * chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>())
}

pub fn symmetrize(m: DMatrix<f64>) -> DMatrix<f64> {
    (&m + m.transpose()) * 0.5
}

/// Solves `min Σ w_i (y_i − d_i'θ)²` by Householder QR on the row-scaled design.
pub fn weighted_least_squares(
    design: &DMatrix<f64>,
    y: &DVector<f64>,
    w: &DVector<f64>,
) -> Result<DVector<f64>> {
    let (n, k) = design.shape();
    if n < k {
        return Err(Error::RankDeficientDesign);
    }
    let mut scaled = design.clone();
    let mut rhs = y.clone();
    for i in 0..n {
        let s = w[i].max(0.0).sqrt();
        scaled.row_mut(i).scale_mut(s);
        rhs[i] *= s;
    }
    let qr = scaled.qr();
    let r = qr.r();
    let max_diag = r.diagonal().iter().fold(0.0_f64, |a, v| a.max(v.abs()));
    if max_diag == 0.0 || r.diagonal().iter().any(|v| v.abs() <= 1e-10 * max_diag) {
        return Err(Error::RankDeficientDesign);
    }
    let qty = qr.q().transpose() * rhs;
    r.solve_upper_triangular(&qty)
        .ok_or(Error::RankDeficientDesign)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn wls_matches_normal_equations() {
        let d = DMatrix::from_row_slice(5, 2, &[1., 0., 1., 1., 1., 2., 1., 3., 1., 4.]);
        let y = DVector::from_vec(vec![1.0, 2.5, 2.9, 4.2, 5.1]);
        let w = DVector::from_vec(vec![0.1, 0.3, 0.2, 0.25, 0.15]);
        let theta = weighted_least_squares(&d, &y, &w).unwrap();
        let wd = DMatrix::from_fn(5, 2, |i, j| d[(i, j)] * w[i]);
        let grad = wd.transpose() * (&y - &d * &theta);
        assert!(grad.amax() < 1e-12);
    }

    #[test]
    fn wls_rejects_collinear_design() {
        let d = DMatrix::from_row_slice(3, 2, &[1., 2., 1., 2., 1., 2.]);
        let y = DVector::from_vec(vec![1.0, 2.0, 3.0]);
        let w = DVector::from_element(3, 1.0 / 3.0);
        assert!(matches!(
            weighted_least_squares(&d, &y, &w),
            Err(Error::RankDeficientDesign)
        ));
    }

    #[test]
    fn log_det_of_diagonal() {
        let m = DMatrix::from_diagonal(&DVector::from_vec(vec![2.0, 3.0]));
        assert!((spd_log_det(&m).unwrap() - 6.0_f64.ln()).abs() < 1e-14);
        assert!((condition_number_sym(&m) - 1.5).abs() < 1e-12);
    }
}
