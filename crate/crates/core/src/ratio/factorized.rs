//! Ratio `e(x, z, v) = e_xz(x, z) · Π_k φ(v_k; target fit) / φ(v_k; source fit)`
//! with each surrogate coordinate modeled as Gaussian-linear in `[x, z]`.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::elastic_net::{fit_elastic_net, ElasticNetFit, ElasticNetOptions, GaussianLinearModel};
use super::logistic::ClassifierRatio;
use super::{log_gaussian_ratio, RatioError};
use crate::model::{DensityRatio, Provenance, RatioValue, UnlabeledPool};
use crate::rng::SeedTree;

/// Ratio of two unit-covariance Gaussians on the leading coordinates of `z`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianMeanShift {
    pub source_mean: Vec<f64>,
    pub target_mean: Vec<f64>,
}

impl GaussianMeanShift {
    pub fn log_ratio(&self, z: &[f64]) -> f64 {
        self.source_mean
            .iter()
            .zip(&self.target_mean)
            .zip(z)
            .map(|((ms, mt), zi)| log_gaussian_ratio(*zi, *mt, 1.0, *ms, 1.0))
            .sum()
    }
}

/// The `(x, z)` factor of a factorized ratio.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum XzFactor {
    Unit,
    MeanShift(GaussianMeanShift),
    Classifier(ClassifierRatio),
}

impl XzFactor {
    fn log_ratio(&self, x: f64, z: &[f64]) -> f64 {
        match self {
            XzFactor::Unit => 0.0,
            XzFactor::MeanShift(m) => m.log_ratio(z),
            XzFactor::Classifier(c) => c.log_ratio(x, z),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactorizedRatio {
    pub xz_factor: XzFactor,
    /// One model per surrogate coordinate, on features `[x, z...]`.
    pub v_source: Vec<GaussianLinearModel>,
    pub v_target: Vec<GaussianLinearModel>,
}

impl FactorizedRatio {
    pub fn log_ratio(&self, x: f64, z: &[f64], v: &[f64]) -> f64 {
        let v_part: f64 = self
            .v_source
            .iter()
            .zip(&self.v_target)
            .zip(v)
            .map(|((s, t), vk)| {
                log_gaussian_ratio(*vk, t.predict_xz(x, z), t.noise_variance, s.predict_xz(x, z), s.noise_variance)
            })
            .sum();
        self.xz_factor.log_ratio(x, z) + v_part
    }
}

impl DensityRatio for FactorizedRatio {
    fn evaluate(&self, x: f64, z: &[f64], v: &[f64]) -> RatioValue {
        RatioValue::from_log(self.log_ratio(x, z, v))
    }

    fn provenance(&self) -> Provenance {
        Provenance::Factorized
    }
}

pub fn build_factorized_ratio(
    xz_factor: XzFactor,
    fits_source: &[ElasticNetFit],
    fits_target: &[ElasticNetFit],
) -> Result<FactorizedRatio, RatioError> {
    if fits_source.len() != fits_target.len() {
        return Err(RatioError::DimensionMismatch { expected: fits_source.len(), found: fits_target.len() });
    }
    for (s, t) in fits_source.iter().zip(fits_target) {
        if s.model.coefficients.len() != t.model.coefficients.len() {
            return Err(RatioError::DimensionMismatch {
                expected: s.model.coefficients.len(),
                found: t.model.coefficients.len(),
            });
        }
    }
    Ok(FactorizedRatio {
        xz_factor,
        v_source: fits_source.iter().map(|f| f.model.clone()).collect(),
        v_target: fits_target.iter().map(|f| f.model.clone()).collect(),
    })
}

/// Stacks the `[x, z...]` rows of the given pools.
pub fn pool_features(pools: &[&UnlabeledPool]) -> Result<DMatrix<f64>, RatioError> {
    let p = pools[0].z_dim();
    if let Some(bad) = pools.iter().find(|pool| pool.z_dim() != p) {
        return Err(RatioError::DimensionMismatch { expected: p, found: bad.z_dim() });
    }
    let rows: Vec<_> = pools.iter().flat_map(|pool| pool.rows()).collect();
    Ok(DMatrix::from_fn(rows.len(), p + 1, |i, j| if j == 0 { rows[i].x } else { rows[i].z[j - 1] }))
}

fn fit_surrogates(pool: &UnlabeledPool, opts: &ElasticNetOptions, seed: SeedTree) -> Result<Vec<ElasticNetFit>, RatioError> {
    let features = pool_features(&[pool])?;
    (0..pool.v_dim())
        .map(|k| {
            let response: Vec<f64> = pool.rows().iter().map(|r| r.v[k]).collect();
            fit_elastic_net(&features, &response, opts, seed.index(k as u64).seed())
        })
        .collect()
}

/// Fits `V | X, Z` in each pool by cross-validated elastic net and combines
/// the fits with `xz_factor`.
pub fn fit_factorized_ratio(
    source: &UnlabeledPool,
    target: &UnlabeledPool,
    xz_factor: XzFactor,
    opts: &ElasticNetOptions,
    seed: u64,
) -> Result<FactorizedRatio, RatioError> {
    if source.v_dim() != target.v_dim() {
        return Err(RatioError::DimensionMismatch { expected: source.v_dim(), found: target.v_dim() });
    }
    let root = SeedTree::new(seed);
    let fits_s = fit_surrogates(source, opts, root.child("source"))?;
    let fits_t = fit_surrogates(target, opts, root.child("target"))?;
    build_factorized_ratio(xz_factor, &fits_s, &fits_t)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{CovariateRow, Population};
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn pool(population: Population, n: usize, slope: f64, seed: u64) -> UnlabeledPool {
        let mut rng = SeedTree::new(seed).rng();
        let rows = (0..n)
            .map(|_| {
                let z: f64 = rng.sample(StandardNormal);
                let x: f64 = z + rng.sample::<f64, _>(StandardNormal);
                let v = 0.5 * z + slope * x + rng.sample::<f64, _>(StandardNormal);
                CovariateRow { x, z: vec![z], v: vec![v] }
            })
            .collect();
        UnlabeledPool::new(population, rows).unwrap()
    }

    #[test]
    fn identical_populations_give_unit_ratio() {
        let opts = ElasticNetOptions::default().with_grid(vec![0.0]);
        let s = pool(Population::Source, 1000, 1.0, 1);
        let t = pool(Population::Target, 1000, 1.0, 2);
        let ratio = fit_factorized_ratio(&s, &t, XzFactor::Unit, &opts, 3).unwrap();
        // Central points: x, z within one sd and v within one residual sd of its mean.
        for x in [-1.0, 0.0, 1.0] {
            for z in [-1.0, 0.0, 1.0] {
                for eps in [-1.0, 0.0, 1.0] {
                    let v = 0.5 * z + x + eps;
                    assert!((ratio.eval(x, &[z], &[v]) - 1.0).abs() < 0.15, "x={x} z={z} eps={eps}");
                }
            }
        }
    }

    #[test]
    fn unit_factor_gives_pure_surrogate_ratio() {
        let model = |b: f64| GaussianLinearModel { coefficients: vec![b, 0.5], intercept: 0.0, noise_variance: 1.0 };
        let ratio = FactorizedRatio { xz_factor: XzFactor::Unit, v_source: vec![model(1.0)], v_target: vec![model(0.0)] };
        let (x, z, v) = (0.7, [0.2], [1.1]);
        let expected = super::super::conditional_gaussian_ratio(v[0], 0.1, 1.0, 0.8, 1.0).value;
        assert!((ratio.eval(x, &z, &v) - expected).abs() < 1e-14);
        assert_eq!(ratio.provenance(), Provenance::Factorized);
    }

    #[test]
    fn mean_shift_factor_matches_closed_form() {
        let m = GaussianMeanShift { source_mean: vec![0.0; 2], target_mean: vec![1.0; 2] };
        let z = [0.3, -0.4, 9.0];
        let closed = (z[0] + z[1] - 1.0f64).exp();
        assert!((m.log_ratio(&z).exp() - closed).abs() < 1e-14);
    }

    #[test]
    fn mismatched_fit_counts_are_rejected() {
        let opts = ElasticNetOptions::default();
        let s = pool(Population::Source, 100, 1.0, 4);
        let f = fit_surrogates(&s, &opts, SeedTree::new(0)).unwrap();
        assert!(build_factorized_ratio(XzFactor::Unit, &f, &[]).is_err());
    }
}
