// SPDX-License-Identifier: MIT OR Apache-2.0

//! Gaussian-process core: the quadratic-form likelihood, full Gaussian
//! log-densities, the predictive distribution, evidence maximization and the
//! residual-producing fit on the bootstrap index range.

mod evidence;
mod factor;

pub use evidence::{
    evidence_maximize, log_evidence, log_evidence_grad, EvidenceBounds, EvidenceOptions,
    EvidenceReport,
};
pub use factor::PdFactor;

use std::ops::RangeInclusive;

use nalgebra::{DMatrix, DVector};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::kernel::{cross_gram, gram_matrix, KernelModel};

const LOG_2PI: f64 = 1.8378770664093453;

/// `-(1/2) y^T K^{-1} y`, computed through the cached factor. Always <= 0.
pub fn quad_loglik(y: &[f64], factor: &PdFactor) -> Result<f64> {
    Ok(-0.5 * factor.quad_form(y)?)
}

/// Log-density of `N(0, K)` at `y`, with all additive constants kept:
/// `-(1/2) y^T K^{-1} y - (1/2) log det K - (M/2) log 2pi`.
pub fn full_logdensity(y: &[f64], k: &DMatrix<f64>) -> Result<f64> {
    let factor = PdFactor::new(k.clone())?;
    let quad = factor.quad_form(y)?;
    let m = y.len() as f64;
    Ok(-0.5 * quad - 0.5 * factor.log_det() - 0.5 * m * LOG_2PI)
}

/// Predictive distribution of the responses at `x_test` given training pairs.
///
/// The mean is `C^T K_l^{-1} y_l` and the covariance is the Schur complement
/// of the training block in the joint Gram matrix, `K_r - C^T K_l^{-1} C`;
/// it therefore carries the noise term on its diagonal. With no training
/// points this reduces to the prior `(0, K(x_test))`.
pub fn predictive(
    model: &KernelModel,
    x_train: &[Vec<f64>],
    y_train: &[f64],
    x_test: &[Vec<f64>],
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    if x_test.is_empty() {
        return Err(Error::invalid_input("predictive needs a nonempty test set"));
    }
    if x_train.len() != y_train.len() {
        return Err(Error::invalid_input(format!(
            "training covariates and responses differ in length: {} vs {}",
            x_train.len(),
            y_train.len()
        )));
    }
    let prior = gram_matrix(model, x_test);
    if x_train.is_empty() {
        return Ok((DVector::zeros(x_test.len()), prior));
    }
    let factor = PdFactor::new(gram_matrix(model, x_train))?;
    let cross = cross_gram(model, x_train, x_test);
    let half = factor.half_solve_mat(&cross); // L^{-1} C
    let cov = &prior - half.transpose() * &half;
    let alpha = factor.solve_vec(&DVector::from_column_slice(y_train));
    let mean = cross.transpose() * alpha;
    Ok((mean, cov))
}

/// A Gaussian-process regression fit on a contiguous index range, with
/// predictions at every covariate of the dataset.
#[derive(Clone, Debug)]
pub struct GpFit {
    pub model: KernelModel,
    /// 1-based inclusive training range.
    pub train_range: RangeInclusive<usize>,
    /// Predictive mean at every covariate, index-aligned with the dataset.
    pub fitted: Vec<f64>,
    /// Residuals `y_i - fitted_i` on the training range only.
    pub residuals: Vec<f64>,
}

/// Fits the GP on the contiguous 1-based range `iboot` and predicts at every
/// covariate; residuals are defined exactly on the training range.
pub fn fit_predict_all(
    dataset: &Dataset,
    iboot: RangeInclusive<usize>,
    model: &KernelModel,
) -> Result<GpFit> {
    let (lo, hi) = (*iboot.start(), *iboot.end());
    if lo == 0 || hi > dataset.len() || lo > hi {
        return Err(Error::invalid_input(format!(
            "training range {lo}..={hi} invalid for dataset of length {}",
            dataset.len()
        )));
    }
    model.validate()?;
    let x_train = &dataset.covariates()[lo - 1..hi];
    let y_train = &dataset.responses()[lo - 1..hi];
    let factor = PdFactor::new(gram_matrix(model, x_train))?;
    let alpha = factor.solve_vec(&DVector::from_column_slice(y_train));
    let cross = cross_gram(model, x_train, dataset.covariates());
    let fitted_vec = cross.transpose() * alpha;
    let fitted: Vec<f64> = fitted_vec.iter().copied().collect();
    let residuals: Vec<f64> = (lo - 1..hi)
        .map(|i| dataset.responses()[i] - fitted[i])
        .collect();
    Ok(GpFit {
        model: *model,
        train_range: iboot,
        fitted,
        residuals,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{synth_generate, SyntheticSpec};
    use crate::kernel::SIGMA2_FLOOR;
    use approx::assert_relative_eq;
    use nalgebra::DMatrix;
    use proptest::prelude::*;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn identity_factor(m: usize) -> PdFactor {
        PdFactor::new(DMatrix::identity(m, m)).unwrap()
    }

    #[test]
    fn quad_loglik_identity_gram() {
        let f = identity_factor(2);
        assert_relative_eq!(
            quad_loglik(&[3.0, 4.0], &f).unwrap(),
            -12.5,
            max_relative = 1e-14
        );
    }

    #[test]
    fn quad_loglik_zero_vector() {
        let f = identity_factor(4);
        assert_eq!(quad_loglik(&[0.0; 4], &f).unwrap(), 0.0);
    }

    #[test]
    fn quad_loglik_matches_dense_inverse_oracle() {
        let a = DMatrix::from_fn(6, 6, |i, j| ((i * 7 + j * 3) as f64 * 0.41).sin());
        let k = &a * a.transpose() + DMatrix::identity(6, 6).scale(0.5);
        let y: Vec<f64> = (0..6).map(|i| (i as f64 - 2.5) * 0.8).collect();
        let f = PdFactor::new(k.clone()).unwrap();
        let inv = k.try_inverse().unwrap();
        let yv = DVector::from_column_slice(&y);
        let oracle = -0.5 * (yv.transpose() * inv * yv)[(0, 0)];
        assert_relative_eq!(quad_loglik(&y, &f).unwrap(), oracle, max_relative = 1e-10);
    }

    #[test]
    fn full_logdensity_standard_normal_at_origin() {
        let k = DMatrix::from_element(1, 1, 1.0);
        assert_relative_eq!(
            full_logdensity(&[0.0], &k).unwrap(),
            -0.5 * LOG_2PI,
            max_relative = 1e-14
        );
    }

    #[test]
    fn full_logdensity_scaled_identity() {
        let c = 0.73;
        let k = DMatrix::identity(2, 2).scale(c);
        assert_relative_eq!(
            full_logdensity(&[0.0, 0.0], &k).unwrap(),
            -(2.0 * std::f64::consts::PI * c).ln(),
            max_relative = 1e-13
        );
    }

    #[test]
    fn full_logdensity_matches_determinant_inverse_oracle() {
        // independent route: LU determinant and explicit inverse
        let a = DMatrix::from_fn(5, 5, |i, j| ((i + 2 * j) as f64 * 0.37).cos());
        let k = &a * a.transpose() + DMatrix::identity(5, 5);
        let y: Vec<f64> = (0..5).map(|i| 0.3 * i as f64 - 0.7).collect();
        let yv = DVector::from_column_slice(&y);
        let lu = k.clone().lu();
        let quad = (yv.transpose() * lu.try_inverse().unwrap() * &yv)[(0, 0)];
        let oracle = -0.5 * quad - 0.5 * lu.determinant().ln() - 2.5 * LOG_2PI;
        assert_relative_eq!(full_logdensity(&y, &k).unwrap(), oracle, max_relative = 1e-10);
    }

    #[test]
    fn full_logdensity_integrates_to_one_1d() {
        // composite Simpson over [-10 sigma, 10 sigma]
        let s2 = 0.4f64;
        let k = DMatrix::from_element(1, 1, s2);
        let sigma = s2.sqrt();
        let (a, b) = (-10.0 * sigma, 10.0 * sigma);
        let steps = 4000; // even
        let h = (b - a) / steps as f64;
        let mut acc = 0.0;
        for i in 0..=steps {
            let x = a + h * i as f64;
            let w = if i == 0 || i == steps {
                1.0
            } else if i % 2 == 1 {
                4.0
            } else {
                2.0
            };
            acc += w * full_logdensity(&[x], &k).unwrap().exp();
        }
        acc *= h / 3.0;
        assert!((acc - 1.0).abs() < 1e-6, "integral {acc}");
    }

    #[test]
    fn predictive_with_empty_training_is_prior() {
        let model = KernelModel::rbf(1.2, 0.5, 0.09).unwrap();
        let xte = vec![vec![0.1], vec![0.9]];
        let (mean, cov) = predictive(&model, &[], &[], &xte).unwrap();
        assert_eq!(mean, DVector::zeros(2));
        assert_eq!(cov, gram_matrix(&model, &xte));
    }

    #[test]
    fn predictive_interpolation_limit() {
        let model = KernelModel::rbf(1.0, 0.5, SIGMA2_FLOOR).unwrap();
        let x = vec![vec![0.4]];
        let y = [0.83];
        let (mean, cov) = predictive(&model, &x, &y, &x).unwrap();
        assert!((mean[0] - y[0]).abs() < 1e-3, "mean {}", mean[0]);
        assert!(
            cov[(0, 0)] > 0.0 && cov[(0, 0)] < 2.0 * SIGMA2_FLOOR + 1e-6,
            "variance {}",
            cov[(0, 0)]
        );
    }

    #[test]
    fn predictive_rejects_empty_test_set() {
        let model = KernelModel::rbf(1.0, 0.5, 0.01).unwrap();
        assert!(predictive(&model, &[], &[], &[]).is_err());
    }

    #[test]
    fn joint_density_factorizes_through_predictive() {
        // p(y) = p(y_l) p(y_r | y_l) where the conditional comes from the
        // Schur complement; checked on random splits.
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for _ in 0..20 {
            let model = KernelModel::rbf(
                rng.random_range(0.5..2.0),
                rng.random_range(0.2..1.5),
                rng.random_range(0.01..0.5),
            )
            .unwrap();
            let pts: Vec<Vec<f64>> = (0..10).map(|_| vec![rng.random_range(0.0..3.0)]).collect();
            let y: Vec<f64> = (0..10).map(|_| rng.random_range(-1.5..1.5)).collect();
            let l = rng.random_range(3..8usize);

            let (xl, xr) = pts.split_at(l);
            let (yl, yr) = y.split_at(l);
            let lhs = full_logdensity(yl, &gram_matrix(&model, xl)).unwrap()
                + full_logdensity(yr, &gram_matrix(&model, xr)).unwrap()
                - full_logdensity(&y, &gram_matrix(&model, &pts)).unwrap();

            let (mean, cov) = predictive(&model, xl, yl, xr).unwrap();
            let centered: Vec<f64> = yr.iter().zip(mean.iter()).map(|(a, b)| a - b).collect();
            let cond = full_logdensity(&centered, &cov).unwrap();
            let rhs = full_logdensity(yr, &gram_matrix(&model, xr)).unwrap() - cond;
            assert!((lhs - rhs).abs() < 1e-8, "identity violated: {lhs} vs {rhs}");
        }
    }

    #[test]
    fn predictive_covariance_eigenvalues_within_joint_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..10 {
            let model = KernelModel::rbf(1.0, 0.6, 0.05).unwrap();
            let pts: Vec<Vec<f64>> = (0..9).map(|_| vec![rng.random_range(0.0..2.0)]).collect();
            let y: Vec<f64> = (0..9).map(|_| rng.random_range(-1.0..1.0)).collect();
            let (xl, xr) = pts.split_at(5);
            let (cov_eig, joint_eig) = {
                let (_, cov) = predictive(&model, xl, &y[..5], xr).unwrap();
                (
                    cov.symmetric_eigen().eigenvalues,
                    gram_matrix(&model, &pts).symmetric_eigen().eigenvalues,
                )
            };
            let joint_max = joint_eig.iter().cloned().fold(f64::MIN, f64::max);
            for ev in cov_eig.iter() {
                assert!(*ev > 0.0 && *ev <= joint_max + 1e-12, "eigenvalue {ev}");
            }
        }
    }

    #[test]
    fn fit_residual_identity_holds_exactly() {
        let ds = synth_generate(&SyntheticSpec::null(60, 0.1, 3)).unwrap();
        let model = KernelModel::rbf(1.0, 0.5, 0.01).unwrap();
        let fit = fit_predict_all(&ds, 1..=30, &model).unwrap();
        assert_eq!(fit.fitted.len(), 60);
        assert_eq!(fit.residuals.len(), 30);
        for (i, r) in fit.residuals.iter().enumerate() {
            let y = ds.responses()[i];
            assert_relative_eq!(fit.fitted[i] + r, y, epsilon = 1e-12);
        }
    }

    #[test]
    fn fit_interpolates_at_noise_floor() {
        // noise-free data and noise variance at the floor: the fit reproduces
        // the training responses
        let ds = synth_generate(&SyntheticSpec::null(24, 0.0, 8)).unwrap();
        let model = KernelModel::rbf(1.0, 0.5, SIGMA2_FLOOR).unwrap();
        let fit = fit_predict_all(&ds, 1..=24, &model).unwrap();
        for r in &fit.residuals {
            assert!(r.abs() < 1e-3, "residual {r}");
        }
    }

    #[test]
    fn fit_rejects_bad_ranges() {
        let ds = synth_generate(&SyntheticSpec::null(20, 0.1, 1)).unwrap();
        let model = KernelModel::rbf(1.0, 0.5, 0.01).unwrap();
        assert!(fit_predict_all(&ds, 0..=10, &model).is_err());
        assert!(fit_predict_all(&ds, 5..=25, &model).is_err());
        #[allow(clippy::reversed_empty_ranges)]
        let empty = 8..=3;
        assert!(fit_predict_all(&ds, empty, &model).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn quad_loglik_is_quadratically_homogeneous(c in -3.0f64..3.0, seed in 0u64..100) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = DMatrix::from_fn(5, 5, |_, _| rng.random_range(-1.0..1.0));
            let k = &a * a.transpose() + DMatrix::identity(5, 5).scale(0.3);
            let f = PdFactor::new(k).unwrap();
            let y: Vec<f64> = (0..5).map(|_| rng.random_range(-2.0..2.0)).collect();
            let scaled: Vec<f64> = y.iter().map(|v| c * v).collect();
            let base = quad_loglik(&y, &f).unwrap();
            let got = quad_loglik(&scaled, &f).unwrap();
            prop_assert!((got - c * c * base).abs() <= 1e-9 * (1.0 + base.abs()));
        }
    }
}
