//! Density-ratio models `e(x, z, v) = P_T(x, z, v) / P_S(x, z, v)`.
//!
//! Every evaluation is carried out in log space and clamped to
//! `[1e-12, 1e12]`; clamp events are flagged on the returned [`RatioValue`].

mod elastic_net;
mod factorized;
mod logistic;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use elastic_net::{
    coordinate_descent, fit_elastic_net, refit, soft_threshold, DescentResult, ElasticNetFit,
    ElasticNetOptions, GaussianLinearModel, Problem, Standardization,
};
pub use factorized::{
    build_factorized_ratio, fit_factorized_ratio, pool_features, FactorizedRatio, GaussianMeanShift,
    XzFactor,
};
pub use logistic::{fit_logistic, ClassifierRatio};
pub use crate::simlab::{analytic_dgp_ratio, AnalyticDgpRatio};

use crate::model::{DensityRatio, Provenance, RatioValue, UnlabeledPool};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum RatioError {
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("non-finite value in fitting data")]
    NonFinite,

    #[error("{rows} rows cannot support {folds} fold(s) with at least 2 rows each")]
    SingularDesign { rows: usize, folds: usize },

    #[error("coordinate descent did not converge at lambda={lambda} after {sweeps} sweeps")]
    NonConvergence { lambda: f64, sweeps: usize, coefficients: Vec<f64> },

    #[error("classes are perfectly separated; the likelihood diverges (add regularization or more overlapping data)")]
    Separation,

    #[error("classifier needs rows from both source and target")]
    MissingClass,

    #[error("invalid option: {0}")]
    InvalidOption(String),
}

/// Log of `φ(v; mean_t, var_t) / φ(v; mean_s, var_s)`.
pub fn log_gaussian_ratio(v: f64, mean_t: f64, var_t: f64, mean_s: f64, var_s: f64) -> f64 {
    let dt = v - mean_t;
    let ds = v - mean_s;
    0.5 * (var_s.ln() - var_t.ln()) + ds * ds / (2.0 * var_s) - dt * dt / (2.0 * var_t)
}

pub fn conditional_gaussian_ratio(v: f64, mean_t: f64, var_t: f64, mean_s: f64, var_s: f64) -> RatioValue {
    debug_assert!(var_t > 0.0 && var_s > 0.0);
    RatioValue::from_log(log_gaussian_ratio(v, mean_t, var_t, mean_s, var_s))
}

/// The same value for every input.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConstantRatio(pub f64);

impl DensityRatio for ConstantRatio {
    fn evaluate(&self, _x: f64, _z: &[f64], _v: &[f64]) -> RatioValue {
        RatioValue::from_log(self.0.ln())
    }

    fn provenance(&self) -> Provenance {
        Provenance::UserSupplied
    }
}

/// A user closure returning `e(x, z, v)`.
pub struct FnRatio<F>(pub F);

impl<F> DensityRatio for FnRatio<F>
where
    F: Fn(f64, &[f64], &[f64]) -> f64 + Send + Sync,
{
    fn evaluate(&self, x: f64, z: &[f64], v: &[f64]) -> RatioValue {
        let raw = (self.0)(x, z, v);
        if raw > 0.0 {
            RatioValue::from_log(raw.ln())
        } else {
            RatioValue::from_log(f64::NEG_INFINITY)
        }
    }

    fn provenance(&self) -> Provenance {
        Provenance::UserSupplied
    }
}

/// Serializable fitted ratio models.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum RatioModel {
    Classifier(ClassifierRatio),
    Factorized(FactorizedRatio),
}

impl DensityRatio for RatioModel {
    fn evaluate(&self, x: f64, z: &[f64], v: &[f64]) -> RatioValue {
        match self {
            RatioModel::Classifier(c) => c.evaluate(x, z, v),
            RatioModel::Factorized(f) => f.evaluate(x, z, v),
        }
    }

    fn provenance(&self) -> Provenance {
        match self {
            RatioModel::Classifier(_) => Provenance::Classifier,
            RatioModel::Factorized(_) => Provenance::Factorized,
        }
    }
}

/// Classifier ratio on `(x, z)` fitted to pooled source and target rows.
pub fn fit_classifier_ratio(source: &UnlabeledPool, target: &UnlabeledPool) -> Result<ClassifierRatio, RatioError> {
    let features = pool_features(&[source, target])?;
    let labels: Vec<bool> = std::iter::repeat_n(false, source.len())
        .chain(std::iter::repeat_n(true, target.len()))
        .collect();
    fit_logistic(&features, &labels)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gaussian_ratio_identities() {
        assert_eq!(conditional_gaussian_ratio(0.3, 1.2, 0.7, 1.2, 0.7).value, 1.0);
        assert_eq!(conditional_gaussian_ratio(0.5, 1.0, 2.0, 0.0, 2.0).value, 1.0);
        let direct = {
            let phi = |v: f64, m: f64| (-(v - m).powi(2) / 2.0).exp();
            phi(1.0, 1.0) / phi(1.0, 0.0)
        };
        let r = conditional_gaussian_ratio(1.0, 1.0, 1.0, 0.0, 1.0);
        assert!((r.value - direct).abs() < 1e-15);
        assert!((r.value - 0.5f64.exp()).abs() < 1e-15);
    }

    #[test]
    fn gaussian_ratio_clamps() {
        let r = conditional_gaussian_ratio(50.0, 50.0, 1.0, 0.0, 1.0);
        assert!(r.clamped);
        assert_eq!(r.value, 1e12);
    }

    #[test]
    fn closure_and_constant_ratios() {
        let f = FnRatio(|x: f64, _: &[f64], _: &[f64]| x * x);
        assert!((f.eval(3.0, &[], &[]) - 9.0).abs() < 1e-12);
        assert_eq!(f.evaluate(0.0, &[], &[]).value, 1e-12);
        assert!(f.evaluate(0.0, &[], &[]).clamped);
        assert_eq!(ConstantRatio(1.0).eval(1.0, &[], &[]), 1.0);
        assert_eq!(ConstantRatio(1.0).provenance(), Provenance::UserSupplied);
    }
}
