// SPDX-License-Identifier: MIT OR Apache-2.0

//! Kernel families, hyperparameters, Gram-matrix construction and the
//! theoretical regularization schedules.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Smallest admissible noise variance, relative to unit-variance responses.
/// Keeps every Gram matrix invertible; evidence maximization is constrained
/// above it.
pub const SIGMA2_FLOOR: f64 = 1e-6;

/// Kernel family. Only the squared-exponential family ships; the interface
/// accepts additional stationary families without other modules changing.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KernelFamily {
    #[default]
    Rbf,
}

/// A kernel family together with its hyperparameters and the regularization
/// multiplier applied to the prior covariance.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KernelModel {
    #[serde(default)]
    pub family: KernelFamily,
    /// Amplitude `theta1`; the kernel value at zero distance is `theta1^2`.
    pub theta1: f64,
    /// Lengthscale `theta2`.
    pub theta2: f64,
    /// Noise variance `sigma2`.
    pub sigma2: f64,
    /// Regularization multiplier `rho` on the prior covariance. Defaults to 1
    /// when the amplitude is learned.
    #[serde(default = "default_rho")]
    pub rho: f64,
}

fn default_rho() -> f64 {
    1.0
}

impl KernelModel {
    /// RBF model with `rho = 1`.
    pub fn rbf(theta1: f64, theta2: f64, sigma2: f64) -> Result<Self> {
        let model = KernelModel {
            family: KernelFamily::Rbf,
            theta1,
            theta2,
            sigma2,
            rho: 1.0,
        };
        model.validate()?;
        Ok(model)
    }

    pub fn with_rho(mut self, rho: f64) -> Result<Self> {
        self.rho = rho;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        if !self.theta1.is_finite() || self.theta1 < 0.0 {
            return Err(Error::invalid_input(format!(
                "kernel amplitude must be finite and >= 0; got {}",
                self.theta1
            )));
        }
        if !self.theta2.is_finite() || self.theta2 <= 0.0 {
            return Err(Error::invalid_input(format!(
                "kernel lengthscale must be finite and > 0; got {}",
                self.theta2
            )));
        }
        if !self.sigma2.is_finite() || self.sigma2 < SIGMA2_FLOOR {
            return Err(Error::invalid_input(format!(
                "noise variance must be finite and >= {SIGMA2_FLOOR}; got {}",
                self.sigma2
            )));
        }
        if !self.rho.is_finite() || self.rho <= 0.0 {
            return Err(Error::invalid_input(format!(
                "regularization multiplier must be finite and > 0; got {}",
                self.rho
            )));
        }
        Ok(())
    }

    /// Kernel value `k(x1, x2)`, without the `rho` multiplier or the noise
    /// term. Symmetric in its arguments, with values in `[0, theta1^2]`.
    pub fn eval(&self, x1: &[f64], x2: &[f64]) -> Result<f64> {
        if x1.len() != x2.len() {
            return Err(Error::invalid_input(format!(
                "kernel arguments have mismatched dimensions {} and {}",
                x1.len(),
                x2.len()
            )));
        }
        Ok(self.eval_unchecked(x1, x2))
    }

    #[inline]
    pub(crate) fn eval_unchecked(&self, x1: &[f64], x2: &[f64]) -> f64 {
        let d2: f64 = x1
            .iter()
            .zip(x2.iter())
            .map(|(a, b)| {
                let d = a - b;
                d * d
            })
            .sum();
        self.theta1 * self.theta1 * (-d2 / (self.theta2 * self.theta2)).exp()
    }
}

/// Gram matrix `K(X)` with entries `rho * k(X_j, X_j') + sigma2 * delta_jj'`.
/// Symmetric with every eigenvalue at least `sigma2`, hence positive definite;
/// diagonal entries equal `rho * theta1^2 + sigma2`.
pub fn gram_matrix(model: &KernelModel, points: &[Vec<f64>]) -> DMatrix<f64> {
    let m = points.len();
    let mut out = DMatrix::zeros(m, m);
    for j in 0..m {
        for i in j..m {
            let v = model.rho * model.eval_unchecked(&points[i], &points[j]);
            out[(i, j)] = v;
            out[(j, i)] = v;
        }
        out[(j, j)] += model.sigma2;
    }
    out
}

/// Cross-covariance block `rho * k(Xa_i, Xb_j)` between two point tuples.
/// Never carries the noise term: the Kronecker delta acts on tuple positions,
/// and the two tuples are distinct by construction.
pub fn cross_gram(model: &KernelModel, a: &[Vec<f64>], b: &[Vec<f64>]) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(a.len(), b.len());
    for (j, xb) in b.iter().enumerate() {
        for (i, xa) in a.iter().enumerate() {
            out[(i, j)] = model.rho * model.eval_unchecked(xa, xb);
        }
    }
    out
}

/// Smoothness class of the regression function, driving the theoretical
/// choice of the regularization multiplier.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SmoothnessClass {
    Sobolev,
    Hoelder,
}

/// Smoothness assumption: class, radius and smoothness index.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SmoothnessSpec {
    pub class: SmoothnessClass,
    /// Smoothness radius.
    pub radius: f64,
    /// Smoothness index; must exceed 1/2.
    pub aleph: f64,
}

impl SmoothnessSpec {
    pub fn new(class: SmoothnessClass, radius: f64, aleph: f64) -> Result<Self> {
        if !radius.is_finite() || radius <= 0.0 {
            return Err(Error::invalid_input(format!(
                "smoothness radius must be finite and > 0; got {radius}"
            )));
        }
        if !aleph.is_finite() || aleph <= 0.5 {
            return Err(Error::invalid_input(format!(
                "smoothness index must exceed 1/2; got {aleph}"
            )));
        }
        Ok(SmoothnessSpec {
            class,
            radius,
            aleph,
        })
    }

    /// Derived rate exponent: `(aleph - 1/2) / (2 aleph)` for Sobolev,
    /// `aleph / (2 aleph + 1)` for Hoelder.
    pub fn kappa(&self) -> f64 {
        match self.class {
            SmoothnessClass::Sobolev => (self.aleph - 0.5) / (2.0 * self.aleph),
            SmoothnessClass::Hoelder => self.aleph / (2.0 * self.aleph + 1.0),
        }
    }
}

/// Regularization multiplier as a function of the sample size:
/// `radius^2 / log M` for Sobolev, and
/// `(radius^2 / log M)^(2 aleph / (2 aleph + 1)) * (1/M)^(1 / (2 aleph + 1))`
/// for Hoelder. `m` is accepted as a real to allow exact formula checks.
pub fn rho_schedule(spec: &SmoothnessSpec, m: f64) -> Result<f64> {
    if !(m > 1.0) {
        return Err(Error::invalid_input(format!(
            "rho schedule requires a sample size > 1; got {m}"
        )));
    }
    let b2 = spec.radius * spec.radius;
    let rho = match spec.class {
        SmoothnessClass::Sobolev => b2 / m.ln(),
        SmoothnessClass::Hoelder => {
            let e = 2.0 * spec.aleph / (2.0 * spec.aleph + 1.0);
            (b2 / m.ln()).powf(e) * m.recip().powf(1.0 / (2.0 * spec.aleph + 1.0))
        }
    };
    Ok(rho)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    #[test]
    fn eval_at_zero_distance_is_amplitude_squared() {
        let k = KernelModel::rbf(1.7, 0.3, 0.01).unwrap();
        let x = vec![0.4, -1.2];
        assert_relative_eq!(k.eval(&x, &x).unwrap(), 1.7 * 1.7, max_relative = 1e-15);
    }

    #[test]
    fn eval_unit_distance() {
        let k = KernelModel::rbf(1.0, 1.0, 0.01).unwrap();
        let v = k.eval(&[0.0], &[1.0]).unwrap();
        assert_relative_eq!(v, (-1.0f64).exp(), max_relative = 1e-15);
    }

    #[test]
    fn eval_zero_amplitude() {
        let k = KernelModel::rbf(0.0, 1.0, 0.01).unwrap();
        assert_eq!(k.eval(&[0.3], &[2.0]).unwrap(), 0.0);
        assert_eq!(k.eval(&[0.3], &[0.3]).unwrap(), 0.0);
    }

    #[test]
    fn eval_dimension_mismatch_errors() {
        let k = KernelModel::rbf(1.0, 1.0, 0.01).unwrap();
        assert!(k.eval(&[0.0], &[0.0, 1.0]).is_err());
    }

    #[test]
    fn gram_single_point() {
        let k = KernelModel::rbf(1.0, 1.0, 0.01).unwrap();
        let g = gram_matrix(&k, &[vec![0.5]]);
        assert_eq!(g.nrows(), 1);
        assert_relative_eq!(g[(0, 0)], 1.01, max_relative = 1e-15);
    }

    #[test]
    fn gram_is_exactly_symmetric() {
        let k = KernelModel::rbf(1.3, 0.7, 0.05).unwrap();
        let pts: Vec<Vec<f64>> = (0..7).map(|i| vec![(i as f64 * 0.77).sin()]).collect();
        let g = gram_matrix(&k, &pts);
        assert_eq!(g, g.transpose());
    }

    #[test]
    fn gram_min_eigenvalue_at_least_sigma2() {
        // Independent eigen-solver oracle on a random point set.
        let k = KernelModel::rbf(1.0, 0.4, 0.09).unwrap();
        let pts: Vec<Vec<f64>> = (0..5)
            .map(|i| vec![(i as f64 * 1.37).sin(), (i as f64 * 0.61).cos()])
            .collect();
        let g = gram_matrix(&k, &pts);
        let eig = g.symmetric_eigen();
        let min = eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
        assert!(min >= 0.09 - 1e-12, "min eigenvalue {min}");
    }

    #[test]
    fn gram_minus_noise_is_psd_up_to_m50() {
        let k = KernelModel::rbf(0.9, 0.25, 0.02).unwrap();
        for m in [2usize, 13, 50] {
            let pts: Vec<Vec<f64>> = (0..m).map(|i| vec![(i as f64 * 0.139).fract()]).collect();
            let mut g = gram_matrix(&k, &pts);
            for i in 0..m {
                g[(i, i)] -= k.sigma2;
            }
            let eig = g.symmetric_eigen();
            let min = eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
            assert!(min >= -1e-10, "kernel block not PSD at m={m}: {min}");
        }
    }

    #[test]
    fn rho_schedule_formula_checks() {
        let sob = SmoothnessSpec::new(SmoothnessClass::Sobolev, 1.0, 1.0).unwrap();
        assert_relative_eq!(
            rho_schedule(&sob, std::f64::consts::E).unwrap(),
            1.0,
            max_relative = 1e-12
        );
        let hoe = SmoothnessSpec::new(SmoothnessClass::Hoelder, 1.0, 1.0).unwrap();
        assert_relative_eq!(
            rho_schedule(&hoe, std::f64::consts::E).unwrap(),
            (-1.0f64 / 3.0).exp(),
            max_relative = 1e-12
        );
        let sob2 = SmoothnessSpec::new(SmoothnessClass::Sobolev, 2.0, 1.0).unwrap();
        assert_relative_eq!(
            rho_schedule(&sob2, 100.0).unwrap(),
            4.0 / 100f64.ln(),
            max_relative = 1e-12
        );
    }

    #[test]
    fn rho_schedule_rejects_degenerate_sample_size() {
        let sob = SmoothnessSpec::new(SmoothnessClass::Sobolev, 1.0, 1.0).unwrap();
        assert!(rho_schedule(&sob, 1.0).is_err());
        assert!(rho_schedule(&sob, 0.0).is_err());
    }

    #[test]
    fn kappa_formulas() {
        let sob = SmoothnessSpec::new(SmoothnessClass::Sobolev, 1.0, 2.0).unwrap();
        assert_relative_eq!(sob.kappa(), 1.5 / 4.0, max_relative = 1e-15);
        let hoe = SmoothnessSpec::new(SmoothnessClass::Hoelder, 1.0, 2.0).unwrap();
        assert_relative_eq!(hoe.kappa(), 2.0 / 5.0, max_relative = 1e-15);
    }

    proptest! {
        #[test]
        fn eval_decreases_with_distance(d1 in 0.0f64..5.0, d2 in 0.0f64..5.0, t2 in 0.1f64..3.0) {
            let k = KernelModel::rbf(1.0, t2, 0.01).unwrap();
            let (near, far) = if d1 <= d2 { (d1, d2) } else { (d2, d1) };
            let kn = k.eval(&[0.0], &[near]).unwrap();
            let kf = k.eval(&[0.0], &[far]).unwrap();
            prop_assert!(kn >= kf);
        }

        #[test]
        fn rho_schedules_decrease_in_sample_size(m in 3.0f64..1e5, step in 1.1f64..10.0) {
            let sob = SmoothnessSpec::new(SmoothnessClass::Sobolev, 1.4, 1.0).unwrap();
            prop_assert!(rho_schedule(&sob, m).unwrap() > rho_schedule(&sob, m * step).unwrap());
            let hoe = SmoothnessSpec::new(SmoothnessClass::Hoelder, 1.4, 1.3).unwrap();
            prop_assert!(rho_schedule(&hoe, m).unwrap() > rho_schedule(&hoe, m * step).unwrap());
        }
    }
}
