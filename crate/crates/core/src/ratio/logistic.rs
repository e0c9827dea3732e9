//! Density ratio by probabilistic classification of target vs. source rows.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::RatioError;
use crate::model::{DensityRatio, Provenance, RatioValue};

const RIDGE_JITTER: f64 = 1e-8;
const LL_TOLERANCE: f64 = 1e-9;
const MAX_ITERATIONS: usize = 200;

/// Logistic model of `P(target | x, z)`; evaluates
/// `prior_correction · p / (1 − p)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierRatio {
    /// Coefficients on `[x, z...]`.
    pub coefficients: Vec<f64>,
    pub intercept: f64,
    /// `n_source / n_target` of the fitting data.
    pub prior_correction: f64,
}

impl ClassifierRatio {
    fn log_odds(&self, x: f64, z: &[f64]) -> f64 {
        let (bx, bz) = self.coefficients.split_first().map_or((0.0, &[][..]), |(a, b)| (*a, b));
        self.intercept + bx * x + bz.iter().zip(z).map(|(b, v)| b * v).sum::<f64>()
    }

    pub fn log_ratio(&self, x: f64, z: &[f64]) -> f64 {
        self.prior_correction.ln() + self.log_odds(x, z)
    }

    pub fn evaluate_xz(&self, x: f64, z: &[f64]) -> RatioValue {
        RatioValue::from_log(self.log_ratio(x, z))
    }
}

impl DensityRatio for ClassifierRatio {
    fn evaluate(&self, x: f64, z: &[f64], _v: &[f64]) -> RatioValue {
        self.evaluate_xz(x, z)
    }

    fn provenance(&self) -> Provenance {
        Provenance::Classifier
    }
}

fn sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + e^t)` without overflow.
fn softplus(t: f64) -> f64 {
    if t > 0.0 {
        t + (-t).exp().ln_1p()
    } else {
        t.exp().ln_1p()
    }
}

fn log_likelihood(design: &DMatrix<f64>, labels: &[bool], beta: &DVector<f64>) -> f64 {
    let eta = design * beta;
    eta.iter()
        .zip(labels)
        .map(|(&t, &is_target)| if is_target { t - softplus(t) } else { -softplus(t) })
        .sum()
}

/// Maximum-likelihood logistic fit of `label = target` on the rows of
/// `features` (columns `[x, z...]`) by iteratively reweighted least squares.
pub fn fit_logistic(features: &DMatrix<f64>, labels: &[bool]) -> Result<ClassifierRatio, RatioError> {
    let (n, p) = features.shape();
    if labels.len() != n {
        return Err(RatioError::DimensionMismatch { expected: n, found: labels.len() });
    }
    if features.iter().any(|v| !v.is_finite()) {
        return Err(RatioError::NonFinite);
    }
    let n_target = labels.iter().filter(|&&t| t).count();
    let n_source = n - n_target;
    if n_target == 0 || n_source == 0 {
        return Err(RatioError::MissingClass);
    }
    if n < p + 2 {
        return Err(RatioError::SingularDesign { rows: n, folds: 1 });
    }

    let design = DMatrix::from_fn(n, p + 1, |i, j| if j == 0 { 1.0 } else { features[(i, j - 1)] });
    let target = DVector::from_iterator(n, labels.iter().map(|&t| if t { 1.0 } else { 0.0 }));
    let mut beta = DVector::zeros(p + 1);
    let mut ll = log_likelihood(&design, labels, &beta);

    for _ in 0..MAX_ITERATIONS {
        let prob = (&design * &beta).map(sigmoid);
        let weights = prob.map(|q| (q * (1.0 - q)).max(1e-300));
        let score = design.tr_mul(&(&target - &prob));
        let weighted = DMatrix::from_fn(n, p + 1, |i, j| design[(i, j)] * weights[i]);
        let mut hessian = design.tr_mul(&weighted);
        for j in 0..=p {
            hessian[(j, j)] += RIDGE_JITTER;
        }
        let step = hessian.cholesky().ok_or(RatioError::Separation)?.solve(&score);

        let mut scale = 1.0;
        let mut next_ll;
        loop {
            let candidate = &beta + &step * scale;
            next_ll = log_likelihood(&design, labels, &candidate);
            if next_ll >= ll || scale < 1e-10 {
                beta = candidate;
                break;
            }
            scale *= 0.5;
        }
        let change = (next_ll - ll).abs();
        ll = next_ll;
        if change < LL_TOLERANCE {
            break;
        }
    }

    let prob = (&design * &beta).map(sigmoid);
    let max_residual = prob.iter().zip(target.iter()).fold(0.0f64, |m, (q, t)| m.max((t - q).abs()));
    if max_residual < 1e-4 || beta.iter().any(|b| !b.is_finite() || b.abs() > 1e8) {
        return Err(RatioError::Separation);
    }

    Ok(ClassifierRatio {
        coefficients: beta.iter().skip(1).copied().collect(),
        intercept: beta[0],
        prior_correction: n_source as f64 / n_target as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeedTree;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn two_populations(n: usize, shift: f64, seed: u64) -> (DMatrix<f64>, Vec<bool>) {
        let mut rng = SeedTree::new(seed).rng();
        let x = DMatrix::from_fn(2 * n, 1, |i, _| {
            let g: f64 = rng.sample(StandardNormal);
            if i >= n { g + shift } else { g }
        });
        let labels = (0..2 * n).map(|i| i >= n).collect();
        (x, labels)
    }

    #[test]
    fn odds_arithmetic() {
        let even = ClassifierRatio { coefficients: vec![0.0], intercept: 0.0, prior_correction: 1.0 };
        assert_eq!(even.eval(0.3, &[], &[]), 1.0);
        let three = ClassifierRatio { coefficients: vec![0.0], intercept: 3f64.ln(), prior_correction: 1.0 };
        assert!((three.eval(0.3, &[], &[]) - 3.0).abs() < 1e-12);
        let sure = ClassifierRatio { coefficients: vec![0.0], intercept: 100.0, prior_correction: 1.0 };
        let v = sure.evaluate(0.0, &[], &[]);
        assert!(v.clamped);
        assert_eq!(v.value, 1e12);
    }

    #[test]
    fn identical_populations_give_unit_ratio() {
        let (x, labels) = two_populations(5_000, 0.0, 1);
        let fit = fit_logistic(&x, &labels).unwrap();
        let mean = (0..10_000).map(|i| fit.eval(x[(i, 0)], &[], &[])).sum::<f64>() / 10_000.0;
        assert!((mean - 1.0).abs() < 0.1);
    }

    #[test]
    fn gaussian_mean_shift_has_unit_log_slope() {
        let (x, labels) = two_populations(10_000, 1.0, 2);
        let fit = fit_logistic(&x, &labels).unwrap();
        assert!((fit.coefficients[0] - 1.0).abs() < 0.1, "{:?}", fit);
        assert!((fit.intercept + 0.5).abs() < 0.1);
    }

    #[test]
    fn prior_correction_is_class_ratio() {
        let (x, mut labels) = two_populations(200, 0.5, 3);
        labels[0] = true;
        let fit = fit_logistic(&x, &labels).unwrap();
        assert!((fit.prior_correction - 199.0 / 201.0).abs() < 1e-15);
    }

    #[test]
    fn separated_classes_are_reported() {
        let x = DMatrix::from_fn(40, 1, |i, _| i as f64);
        let labels: Vec<bool> = (0..40).map(|i| i >= 20).collect();
        assert_eq!(fit_logistic(&x, &labels), Err(RatioError::Separation));
        assert_eq!(fit_logistic(&x, &[false; 40]), Err(RatioError::MissingClass));
    }
}
