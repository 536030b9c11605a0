// SPDX-License-Identifier: MIT OR Apache-2.0

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Lower-triangular Cholesky factor of a symmetric positive-definite matrix,
/// together with the log-determinant of the source matrix.
///
/// A failed factorization triggers one retry with `1e-10 * mean(diagonal)`
/// added to the diagonal; a second failure is a hard error.
#[derive(Clone, Debug)]
pub struct PdFactor {
    lower: DMatrix<f64>,
    log_det: f64,
}

impl PdFactor {
    pub fn new(matrix: DMatrix<f64>) -> Result<Self> {
        let m = matrix.nrows();
        if m == 0 || matrix.ncols() != m {
            return Err(Error::invalid_input(format!(
                "factorization needs a nonempty square matrix; got {}x{}",
                m,
                matrix.ncols()
            )));
        }
        let mean_diag = matrix.diagonal().sum() / m as f64;
        let retry = matrix.clone();
        match nalgebra::Cholesky::new(matrix) {
            Some(chol) => Ok(Self::from_cholesky(chol)),
            None => {
                let jitter = 1e-10 * mean_diag;
                let mut bumped = retry;
                for i in 0..m {
                    bumped[(i, i)] += jitter;
                }
                match nalgebra::Cholesky::new(bumped) {
                    Some(chol) => Ok(Self::from_cholesky(chol)),
                    None => Err(Error::factorization(format!(
                        "matrix of size {m} not positive definite, even with jitter {jitter:e}"
                    ))),
                }
            }
        }
    }

    fn from_cholesky(chol: nalgebra::Cholesky<f64, nalgebra::Dyn>) -> Self {
        let lower = chol.unpack();
        let log_det = 2.0 * lower.diagonal().iter().map(|d| d.ln()).sum::<f64>();
        PdFactor { lower, log_det }
    }

    pub fn size(&self) -> usize {
        self.lower.nrows()
    }

    pub fn log_det(&self) -> f64 {
        self.log_det
    }

    pub fn lower(&self) -> &DMatrix<f64> {
        &self.lower
    }

    /// `|| L^{-1} y ||^2 = y^T K^{-1} y` in a single forward sweep.
    pub fn quad_form(&self, y: &[f64]) -> Result<f64> {
        let m = self.size();
        if y.len() != m {
            return Err(Error::invalid_input(format!(
                "quadratic form expects a vector of length {m}; got {}",
                y.len()
            )));
        }
        let mut z = y.to_vec();
        let l = self.lower.as_slice(); // column-major
        let mut acc = 0.0;
        for j in 0..m {
            let zj = z[j] / l[j * m + j];
            acc += zj * zj;
            z[j] = zj;
            let col = &l[j * m..(j + 1) * m];
            for (zi, lij) in z[j + 1..].iter_mut().zip(&col[j + 1..]) {
                *zi -= lij * zj;
            }
        }
        Ok(acc)
    }

    /// `K^{-1} y` via the two triangular solves.
    pub fn solve_vec(&self, y: &DVector<f64>) -> DVector<f64> {
        let mut z = self
            .lower
            .solve_lower_triangular(y)
            .expect("factor has positive diagonal");
        z = self
            .lower
            .tr_solve_lower_triangular(&z)
            .expect("factor has positive diagonal");
        z
    }

    /// `K^{-1} B` column-wise.
    pub fn solve_mat(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        let z = self
            .lower
            .solve_lower_triangular(b)
            .expect("factor has positive diagonal");
        self.lower
            .tr_solve_lower_triangular(&z)
            .expect("factor has positive diagonal")
    }

    /// `L^{-1} B`.
    pub fn half_solve_mat(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        self.lower
            .solve_lower_triangular(b)
            .expect("factor has positive diagonal")
    }

    /// `L L^T`, for reconstruction checks.
    pub fn reconstruct(&self) -> DMatrix<f64> {
        &self.lower * self.lower.transpose()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn random_pd(m: usize, seed: u64) -> DMatrix<f64> {
        let a = DMatrix::from_fn(m, m, |i, j| {
            ((seed as f64 + 1.0) * (i as f64 * 0.71 + j as f64 * 1.13 + 0.37)).sin()
        });
        &a * a.transpose() + DMatrix::identity(m, m)
    }

    #[test]
    fn reconstructs_source_matrix() {
        let k = random_pd(8, 3);
        let f = PdFactor::new(k.clone()).unwrap();
        let r = f.reconstruct();
        let err = (&r - &k).norm() / k.norm();
        assert!(err < 1e-10, "relative Frobenius error {err}");
    }

    #[test]
    fn log_det_matches_lu_determinant() {
        let k = random_pd(6, 9);
        let f = PdFactor::new(k.clone()).unwrap();
        let det = k.lu().determinant();
        assert_relative_eq!(f.log_det(), det.ln(), max_relative = 1e-10);
    }

    #[test]
    fn quad_form_matches_explicit_inverse() {
        let k = random_pd(6, 1);
        let f = PdFactor::new(k.clone()).unwrap();
        let y: Vec<f64> = (0..6).map(|i| (i as f64 * 0.9 - 2.0).cos()).collect();
        let inv = k.try_inverse().unwrap();
        let yv = DVector::from_column_slice(&y);
        let oracle = (yv.transpose() * inv * &yv)[(0, 0)];
        assert_relative_eq!(f.quad_form(&y).unwrap(), oracle, max_relative = 1e-10);
    }

    #[test]
    fn solve_vec_matches_explicit_inverse() {
        let k = random_pd(7, 5);
        let f = PdFactor::new(k.clone()).unwrap();
        let y = DVector::from_fn(7, |i, _| (i as f64).sin() + 0.2);
        let got = f.solve_vec(&y);
        let oracle = k.try_inverse().unwrap() * &y;
        assert!((got - oracle).amax() < 1e-10);
    }

    #[test]
    fn near_singular_matrix_takes_jitter_path() {
        // rank-1 + eps on most of the diagonal: plain Cholesky fails in f64
        let m = 5;
        let ones = DMatrix::from_element(m, m, 1.0);
        let mut k = ones;
        for i in 0..m - 1 {
            k[(i, i)] += 1e-13;
        }
        // either factorization succeeds via jitter or reports cleanly
        match PdFactor::new(k) {
            Ok(f) => assert_eq!(f.size(), m),
            Err(e) => assert!(matches!(e, Error::Factorization(_))),
        }
    }

    #[test]
    fn rejects_indefinite_matrix() {
        let mut k = DMatrix::identity(3, 3);
        k[(2, 2)] = -4.0;
        assert!(PdFactor::new(k).is_err());
    }
}
