use std::f64::consts::PI;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{Error, Result};

/// Relative eigenvalue floor used for whitening and covariance updates.
pub const EIG_FLOOR: f64 = 1e-8;

/// Eigen-decomposition of a symmetric matrix with eigenvalues in descending
/// order. Each eigenvector's largest-magnitude entry is made positive.
pub fn sym_eigen_desc(m: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let sym = (m + m.transpose()) * 0.5;
    let eig = sym.symmetric_eigen();
    let n = m.nrows();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let values = DVector::from_iterator(n, order.iter().map(|&i| eig.eigenvalues[i]));
    let mut vectors = DMatrix::zeros(n, n);
    for (k, &i) in order.iter().enumerate() {
        let mut v = eig.eigenvectors.column(i).into_owned();
        let pivot = v.iter().copied().fold(0.0f64, |m, x| if x.abs() > m.abs() { x } else { m });
        if pivot < 0.0 {
            v = -v;
        }
        vectors.set_column(k, &v);
    }
    (values, vectors)
}

/// Clamps eigenvalues to at least `EIG_FLOOR * max`. Returns the repaired
/// matrix and how many eigenvalues were raised.
pub fn floor_psd(m: &DMatrix<f64>) -> (DMatrix<f64>, usize) {
    let (vals, vecs) = sym_eigen_desc(m);
    let max = vals.max().max(0.0);
    let floor = if max > 0.0 { EIG_FLOOR * max } else { EIG_FLOOR };
    let mut raised = 0;
    let clamped = vals.map(|v| {
        if v < floor {
            raised += 1;
            floor
        } else {
            v
        }
    });
    if raised == 0 {
        return ((m + m.transpose()) * 0.5, 0);
    }
    (&vecs * DMatrix::from_diagonal(&clamped) * vecs.transpose(), raised)
}

/// `m^{-1/2}` of a symmetric positive definite matrix, or an error when
/// its smallest eigenvalue falls below the relative floor.
pub fn inv_sqrt_strict(m: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    let (vals, vecs) = sym_eigen_desc(m);
    let max = vals.max();
    if !(max > 0.0) || vals.min() < EIG_FLOOR * max {
        return Err(Error::Degenerate(format!(
            "{what} is singular (eigenvalues {:.3e} .. {:.3e})",
            vals.min(),
            max
        )));
    }
    let d = vals.map(|v| 1.0 / v.sqrt());
    Ok(&vecs * DMatrix::from_diagonal(&d) * vecs.transpose())
}

/// Gaussian with cached Cholesky factor for repeated density evaluation.
#[derive(Debug, Clone)]
pub struct Gaussian {
    chol: Cholesky<f64, Dyn>,
    log_norm: f64,
}

impl Gaussian {
    pub fn new(cov: &DMatrix<f64>) -> Result<Self> {
        let d = cov.nrows() as f64;
        let chol = Cholesky::new(cov.clone())
            .ok_or_else(|| Error::Numerical("covariance is not positive definite".into()))?;
        let log_det: f64 = 2.0 * chol.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>();
        Ok(Self {
            chol,
            log_norm: -0.5 * (d * (2.0 * PI).ln() + log_det),
        })
    }

    pub fn log_det(&self) -> f64 {
        -2.0 * self.log_norm - self.chol.l_dirty().nrows() as f64 * (2.0 * PI).ln()
    }

    /// `x^T cov^{-1} x`
    pub fn mahalanobis(&self, x: &DVector<f64>) -> f64 {
        let z = self
            .chol
            .l_dirty()
            .solve_lower_triangular(x)
            .expect("cholesky factor is nonsingular");
        z.norm_squared()
    }

    /// Zero-mean log density.
    pub fn log_pdf(&self, x: &DVector<f64>) -> f64 {
        self.log_norm - 0.5 * self.mahalanobis(x)
    }

    pub fn inverse(&self) -> DMatrix<f64> {
        self.chol.inverse()
    }
}

pub fn mean_of(rows: &[&DVector<f64>]) -> DVector<f64> {
    let mut m = DVector::zeros(rows[0].len());
    for r in rows {
        m += *r;
    }
    m / rows.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn eigen_is_sorted_and_reconstructs() {
        let m = DMatrix::from_row_slice(3, 3, &[4.0, 1.0, 0.5, 1.0, 3.0, 0.2, 0.5, 0.2, 1.0]);
        let (vals, vecs) = sym_eigen_desc(&m);
        assert!(vals[0] >= vals[1] && vals[1] >= vals[2]);
        let back = &vecs * DMatrix::from_diagonal(&vals) * vecs.transpose();
        assert!((back - m).amax() < 1e-12);
    }

    #[test]
    fn gaussian_matches_one_dimensional_formula() {
        let g = Gaussian::new(&DMatrix::from_element(1, 1, 4.0)).unwrap();
        let x = DVector::from_element(1, 1.5);
        let expected = -0.5 * (2.0 * PI * 4.0).ln() - 0.5 * 1.5 * 1.5 / 4.0;
        assert!((g.log_pdf(&x) - expected).abs() < 1e-14);
        assert!((g.log_det() - 4f64.ln()).abs() < 1e-14);
    }

    #[test]
    fn floor_repairs_indefinite_matrix() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1e-3]);
        let (fixed, raised) = floor_psd(&m);
        assert_eq!(raised, 1);
        assert!(Gaussian::new(&fixed).is_ok());
        assert!(inv_sqrt_strict(&m, "test").is_err());
    }
}
