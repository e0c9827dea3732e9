//! Domain types shared by every module: labeled source data, unlabeled pools,
//! the contracts for user-pluggable functions, test configuration and the
//! report a test run emits.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::RngCore;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::LabelSummary;
use crate::gchisq::SpectralWeights;
use crate::rng::{streams, SeedTree};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DataError {
    #[error("row {row}: non-finite value in {field}")]
    NonFinite { row: usize, field: String },

    #[error("row {row}: dimensions differ from the first row")]
    DimensionMismatch { row: usize },

    #[error("dataset has no rows")]
    Empty,

    #[error("cannot split {n} rows with fraction {fraction}: one part would be empty")]
    EmptySplit { n: usize, fraction: f64 },

    #[error("pool holds {found} rows, expected {expected}")]
    WrongPopulation { expected: Population, found: Population },
}

/// One labeled observation `(Y, X, Z, V)` from the source population.
///
/// Binary treatments are stored as `0.0` / `1.0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledSample {
    pub y: f64,
    pub x: f64,
    pub z: Vec<f64>,
    pub v: Vec<f64>,
}

impl LabeledSample {
    pub fn new(y: f64, x: f64, z: Vec<f64>, v: Vec<f64>) -> Self {
        LabeledSample { y, x, z, v }
    }
}

fn check_finite(row: usize, y: Option<f64>, x: f64, z: &[f64], v: &[f64]) -> Result<(), DataError> {
    let bad = |field: String| Err(DataError::NonFinite { row, field });
    if let Some(y) = y {
        if !y.is_finite() {
            return bad("y".into());
        }
    }
    if !x.is_finite() {
        return bad("x".into());
    }
    if let Some(i) = z.iter().position(|value| !value.is_finite()) {
        return bad(format!("z[{i}]"));
    }
    if let Some(i) = v.iter().position(|value| !value.is_finite()) {
        return bad(format!("v[{i}]"));
    }
    Ok(())
}

/// Validated collection of labeled source rows with uniform dimensions.
#[derive(Debug, Clone, PartialEq)]
pub struct SourceDataset {
    samples: Vec<LabeledSample>,
}

impl SourceDataset {
    pub fn new(samples: Vec<LabeledSample>) -> Result<Self, DataError> {
        validate_dataset(samples)
    }

    pub fn samples(&self) -> &[LabeledSample] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<LabeledSample> {
        self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn z_dim(&self) -> usize {
        self.samples[0].z.len()
    }

    pub fn v_dim(&self) -> usize {
        self.samples[0].v.len()
    }

    /// Rows at the given indices, in the given order.
    pub fn subset(&self, indices: &[usize]) -> Result<SourceDataset, DataError> {
        let rows = indices.iter().map(|&i| self.samples[i].clone()).collect();
        SourceDataset::new(rows)
    }
}

/// Returns the rows as a [`SourceDataset`] iff every row is finite and all rows
/// share the dimensions of the first; otherwise reports the first offending
/// row (0-based) and field.
pub fn validate_dataset(samples: Vec<LabeledSample>) -> Result<SourceDataset, DataError> {
    let first = samples.first().ok_or(DataError::Empty)?;
    let (p, d) = (first.z.len(), first.v.len());
    for (row, s) in samples.iter().enumerate() {
        if s.z.len() != p || s.v.len() != d {
            return Err(DataError::DimensionMismatch { row });
        }
        check_finite(row, Some(s.y), s.x, &s.z, &s.v)?;
    }
    Ok(SourceDataset { samples })
}

/// Random disjoint partition into `round(fraction·n)` and the remaining rows.
/// Both parts keep the original row order.
pub fn split_dataset(
    dataset: &SourceDataset,
    fraction: f64,
    seed: u64,
) -> Result<(SourceDataset, SourceDataset), DataError> {
    let n = dataset.len();
    let size_a = (fraction * n as f64).round();
    if !(fraction > 0.0 && fraction < 1.0) || size_a < 1.0 || size_a >= n as f64 {
        return Err(DataError::EmptySplit { n, fraction });
    }
    let size_a = size_a as usize;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut SeedTree::new(seed).child(streams::SPLIT).rng());
    let (a, b) = order.split_at_mut(size_a);
    a.sort_unstable();
    b.sort_unstable();
    Ok((dataset.subset(a)?, dataset.subset(b)?))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Population {
    Source,
    Target,
}

impl fmt::Display for Population {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Population::Source => f.write_str("source"),
            Population::Target => f.write_str("target"),
        }
    }
}

/// Unlabeled covariates `(X, Z, V)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovariateRow {
    pub x: f64,
    pub z: Vec<f64>,
    pub v: Vec<f64>,
}

/// Unlabeled rows from one population, used for ratio estimation and for
/// estimating target-population means.
#[derive(Debug, Clone, PartialEq)]
pub struct UnlabeledPool {
    population: Population,
    rows: Vec<CovariateRow>,
}

impl UnlabeledPool {
    pub fn new(population: Population, rows: Vec<CovariateRow>) -> Result<Self, DataError> {
        let first = rows.first().ok_or(DataError::Empty)?;
        let (p, d) = (first.z.len(), first.v.len());
        for (row, r) in rows.iter().enumerate() {
            if r.z.len() != p || r.v.len() != d {
                return Err(DataError::DimensionMismatch { row });
            }
            check_finite(row, None, r.x, &r.z, &r.v)?;
        }
        Ok(UnlabeledPool { population, rows })
    }

    pub fn population(&self) -> Population {
        self.population
    }

    pub fn rows(&self) -> &[CovariateRow] {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn z_dim(&self) -> usize {
        self.rows[0].z.len()
    }

    pub fn v_dim(&self) -> usize {
        self.rows[0].v.len()
    }
}

/// Draws one `X` from the target conditional `P_T(X | Z = z)`.
///
/// Implementations must be deterministic given the state of `rng`.
pub trait ConditionalSampler: Send + Sync {
    fn sample(&self, z: &[f64], rng: &mut dyn RngCore) -> f64;
}

impl<F> ConditionalSampler for F
where
    F: Fn(&[f64], &mut dyn RngCore) -> f64 + Send + Sync,
{
    fn sample(&self, z: &[f64], rng: &mut dyn RngCore) -> f64 {
        self(z, rng)
    }
}

/// Test statistic `T(x, y, z, v)`. Must be pure.
pub trait Statistic: Send + Sync {
    fn score(&self, x: f64, y: f64, z: &[f64], v: &[f64]) -> f64;
}

impl<F> Statistic for F
where
    F: Fn(f64, f64, &[f64], &[f64]) -> f64 + Send + Sync,
{
    fn score(&self, x: f64, y: f64, z: &[f64], v: &[f64]) -> f64 {
        self(x, y, z, v)
    }
}

/// `T = y · x`. Ignores `z` and `v`.
#[derive(Debug, Clone, Copy, Default)]
pub struct ProductStatistic;

impl Statistic for ProductStatistic {
    fn score(&self, x: f64, y: f64, _z: &[f64], _v: &[f64]) -> f64 {
        y * x
    }
}

/// Control variate `a(x, z, v)`. Must be pure.
pub trait ControlVariate: Send + Sync {
    fn value(&self, x: f64, z: &[f64], v: &[f64]) -> f64;
}

impl<F> ControlVariate for F
where
    F: Fn(f64, &[f64], &[f64]) -> f64 + Send + Sync,
{
    fn value(&self, x: f64, z: &[f64], v: &[f64]) -> f64 {
        self(x, z, v)
    }
}

/// `a(x, z, v) = v[0]`.
#[derive(Debug, Clone, Copy, Default)]
pub struct FirstSurrogate;

impl ControlVariate for FirstSurrogate {
    fn value(&self, _x: f64, _z: &[f64], v: &[f64]) -> f64 {
        v[0]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Provenance {
    Analytic,
    Classifier,
    Factorized,
    UserSupplied,
}

/// One density-ratio evaluation. `clamped` is set when the raw value fell
/// outside the representable band and was pinned to its edge.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RatioValue {
    pub value: f64,
    pub clamped: bool,
}

/// Lower and upper clamp for every ratio evaluation.
pub const RATIO_FLOOR: f64 = 1e-12;
pub const RATIO_CEILING: f64 = 1e12;

impl RatioValue {
    /// Exponentiates a log-ratio and clamps it to `[RATIO_FLOOR, RATIO_CEILING]`.
    pub fn from_log(log_value: f64) -> Self {
        let (lo, hi) = (RATIO_FLOOR.ln(), RATIO_CEILING.ln());
        if log_value.is_nan() || log_value > hi {
            RatioValue { value: RATIO_CEILING, clamped: true }
        } else if log_value < lo {
            RatioValue { value: RATIO_FLOOR, clamped: true }
        } else {
            RatioValue { value: log_value.exp(), clamped: false }
        }
    }
}

/// Density ratio `e(x, z, v) = P_T(x, z, v) / P_S(x, z, v)`.
pub trait DensityRatio: Send + Sync {
    fn evaluate(&self, x: f64, z: &[f64], v: &[f64]) -> RatioValue;

    fn provenance(&self) -> Provenance;

    fn eval(&self, x: f64, z: &[f64], v: &[f64]) -> f64 {
        self.evaluate(x, z, v).value
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "cspcr")]
    Cspcr,
    #[serde(rename = "cspcr-pe")]
    CspcrPe,
    #[serde(rename = "pcr")]
    Pcr,
    #[serde(rename = "is")]
    Is,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Cspcr, Method::CspcrPe, Method::Pcr, Method::Is];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Cspcr => "cspcr",
            Method::CspcrPe => "cspcr-pe",
            Method::Pcr => "pcr",
            Method::Is => "is",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| format!("unknown method `{s}` (expected cspcr, cspcr-pe, pcr or is)"))
    }
}

/// How importance weights enter the label sums.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WeightScaling {
    /// `w_j = e(X_j, Z_j, V_j)` exactly.
    Raw,
    /// `w_j = e_j / mean(e)`, so the weights sum to `n`.
    #[default]
    MeanOne,
}

/// Estimator of the control-variate coefficient `γ_ℓ`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GammaEstimator {
    /// Sample covariance of `w·1{ℓ}` with `w·a` over the sample variance of `w·a`.
    CovarianceRatio,
    /// Slope of the `w`-weighted least-squares regression of `1{ℓ}` on `a`
    /// with an intercept.
    #[default]
    WeightedRegression,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ConfigError {
    #[error("K must be at least 1")]
    ZeroK,
    #[error("L must be at least 2, got {0}")]
    TooFewLabels(usize),
    #[error("alpha must lie in (0, 1), got {0}")]
    Alpha(f64),
    #[error("m_resample must be in 1..={n}, got {m}")]
    Resample { m: usize, n: usize },
}

/// Parameters of one test run. The counterfeit count is `M = K·L − 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestConfig {
    pub k: usize,
    pub l: usize,
    pub alpha: f64,
    pub method: Method,
    pub seed: u64,
    /// Rows drawn by the importance-resampling comparator; `None` means `n / 5`.
    pub m_resample: Option<usize>,
    pub weight_scaling: WeightScaling,
    pub gamma_estimator: GammaEstimator,
}

impl TestConfig {
    pub const DEFAULT_K: usize = 50;
    pub const DEFAULT_L: usize = 3;

    pub fn new(method: Method) -> Self {
        TestConfig {
            k: Self::DEFAULT_K,
            l: Self::DEFAULT_L,
            alpha: 0.05,
            method,
            seed: 0,
            m_resample: None,
            weight_scaling: WeightScaling::default(),
            gamma_estimator: GammaEstimator::default(),
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_kl(mut self, k: usize, l: usize) -> Self {
        self.k = k;
        self.l = l;
        self
    }

    pub fn counterfeits(&self) -> usize {
        self.k * self.l - 1
    }

    /// Resample size used by the importance-resampling comparator.
    pub fn resample_size(&self, n: usize) -> usize {
        self.m_resample.unwrap_or((n / 5).max(1))
    }

    pub fn validate(&self, n: usize) -> Result<(), ConfigError> {
        if self.k == 0 {
            return Err(ConfigError::ZeroK);
        }
        if self.l < 2 {
            return Err(ConfigError::TooFewLabels(self.l));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(ConfigError::Alpha(self.alpha));
        }
        if self.method == Method::Is {
            let m = self.resample_size(n);
            if m == 0 || m > n {
                return Err(ConfigError::Resample { m, n });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    /// Mean of the unscaled weights.
    pub weight_mean: f64,
    pub weight_max: f64,
    /// Effective sample size `(Σw)² / Σw²`.
    pub ess: f64,
    /// Ratio evaluations pinned to the clamp band.
    pub clamp_count: u64,
}

impl Diagnostics {
    pub fn from_weights(weights: &[f64], clamp_count: u64) -> Self {
        let sum: f64 = weights.iter().sum();
        let sum_sq: f64 = weights.iter().map(|w| w * w).sum();
        Diagnostics {
            weight_mean: sum / weights.len() as f64,
            weight_max: weights.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            ess: if sum_sq > 0.0 { sum * sum / sum_sq } else { 0.0 },
            clamp_count,
        }
    }
}

/// Outcome of one test run.
#[derive(Debug, Clone, PartialEq)]
pub struct TestReport {
    pub method: Method,
    /// Rows entering the statistic (the resample size for the IS comparator).
    pub n: usize,
    pub k: usize,
    pub l: usize,
    pub alpha: f64,
    pub seed: u64,
    pub statistic: f64,
    pub threshold: f64,
    pub p_value: f64,
    pub reject: bool,
    pub per_label: LabelSummary,
    pub spectral: SpectralWeights,
    pub diagnostics: Diagnostics,
}

impl TestReport {
    /// `reject ⇔ U ≥ θ ⇔ p ≤ α`.
    pub fn is_consistent(&self) -> bool {
        self.reject == (self.statistic >= self.threshold) && self.reject == (self.p_value <= self.alpha)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(y: f64, z0: f64) -> LabeledSample {
        LabeledSample::new(y, 0.5, vec![z0, 1.0], vec![0.1])
    }

    #[test]
    fn valid_rows_pass_through_unchanged() {
        let rows = vec![row(1.0, 0.0), row(2.0, 1.0), row(3.0, 2.0)];
        let ds = validate_dataset(rows.clone()).unwrap();
        assert_eq!(ds.samples(), rows.as_slice());
    }

    #[test]
    fn first_non_finite_field_is_reported() {
        let mut rows = vec![row(1.0, 0.0), row(2.0, 1.0), row(3.0, 2.0)];
        rows[2].v[0] = f64::NAN;
        assert_eq!(
            validate_dataset(rows).unwrap_err(),
            DataError::NonFinite { row: 2, field: "v[0]".into() }
        );
    }

    #[test]
    fn empty_and_ragged_inputs_are_rejected() {
        assert_eq!(validate_dataset(vec![]).unwrap_err(), DataError::Empty);
        let mut rows = vec![row(1.0, 0.0), row(2.0, 1.0)];
        rows[1].z.push(3.0);
        assert_eq!(validate_dataset(rows).unwrap_err(), DataError::DimensionMismatch { row: 1 });
    }

    #[test]
    fn split_sizes_follow_rounding() {
        let ds = SourceDataset::new((0..10).map(|i| row(i as f64, 0.0)).collect()).unwrap();
        let (a, b) = split_dataset(&ds, 0.5, 7).unwrap();
        assert_eq!((a.len(), b.len()), (5, 5));

        let big = SourceDataset::new((0..1131).map(|i| row(i as f64, 0.0)).collect()).unwrap();
        let (a, b) = split_dataset(&big, 0.5, 7).unwrap();
        assert!(a.len() == 565 || a.len() == 566);
        assert_eq!(a.len() + b.len(), 1131);
    }

    #[test]
    fn split_is_deterministic_and_rejects_empty_parts() {
        let ds = SourceDataset::new((0..20).map(|i| row(i as f64, 0.0)).collect()).unwrap();
        assert_eq!(split_dataset(&ds, 0.3, 11).unwrap(), split_dataset(&ds, 0.3, 11).unwrap());
        assert_ne!(split_dataset(&ds, 0.3, 11).unwrap(), split_dataset(&ds, 0.3, 12).unwrap());
        assert!(matches!(split_dataset(&ds, 0.01, 1), Err(DataError::EmptySplit { .. })));
        assert!(matches!(split_dataset(&ds, 0.99, 1), Err(DataError::EmptySplit { .. })));
    }

    #[test]
    fn config_derives_counterfeit_count() {
        let cfg = TestConfig::new(Method::Cspcr).with_kl(2, 3);
        assert_eq!(cfg.counterfeits(), 5);
        assert!(cfg.validate(10).is_ok());
        assert_eq!(TestConfig::new(Method::Cspcr).with_kl(1, 1).validate(10), Err(ConfigError::TooFewLabels(1)));
        let mut is = TestConfig::new(Method::Is);
        is.m_resample = Some(11);
        assert!(matches!(is.validate(10), Err(ConfigError::Resample { .. })));
    }

    #[test]
    fn ratio_value_clamps_both_ends() {
        assert!(RatioValue::from_log(100.0).clamped);
        assert_eq!(RatioValue::from_log(100.0).value, RATIO_CEILING);
        assert_eq!(RatioValue::from_log(-100.0).value, RATIO_FLOOR);
        let mid = RatioValue::from_log(0.5);
        assert!(!mid.clamped);
        assert!((mid.value - 0.5f64.exp()).abs() < 1e-15);
    }

    #[test]
    fn method_names_round_trip() {
        for m in Method::ALL {
            assert_eq!(m.as_str().parse::<Method>().unwrap(), m);
        }
        assert!("foo".parse::<Method>().is_err());
    }
}
