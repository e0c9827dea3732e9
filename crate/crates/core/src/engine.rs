//! The four test procedures and their building blocks.
//!
//! - csPCR: importance-weighted label counts `W_ℓ`, their covariance `Ω̂`,
//!   and `U = (L/n) Σ (W_ℓ − n/L)²` compared against the generalized
//!   chi-squared law of `Ω̂`.
//! - csPCR-pe: the same with control-variate augmented sums `W̃_ℓ` and the
//!   sample covariance `Ω̃` of their per-row contributions.
//! - PCR: unweighted labels against `χ²_{L−1}`.
//! - IS: PCR on rows resampled with probability proportional to the weights.

use nalgebra::DMatrix;
use rand::Rng;
use thiserror::Error;

use crate::gchisq::{
    gchisq_sf, rejection_threshold, spectral_weights, CovMatrix, GchisqError, SpectralWeights,
};
use crate::model::{
    ConditionalSampler, ConfigError, ControlVariate, DataError, DensityRatio, Diagnostics,
    FirstSurrogate, GammaEstimator, Method, Population, SourceDataset, Statistic, TestConfig,
    TestReport, UnlabeledPool, WeightScaling,
};
use crate::randomize::{assign_labels, assign_labels_indexed, RandomizeError};
use crate::rng::{streams, SeedTree};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TestError {
    #[error(transparent)]
    Data(#[from] DataError),

    #[error(transparent)]
    Config(#[from] ConfigError),

    #[error(transparent)]
    Randomize(#[from] RandomizeError),

    #[error("degenerate null law: every spectral weight of the covariance matrix is zero")]
    DegenerateNull,

    #[error(transparent)]
    Gchisq(GchisqError),

    #[error("method {0} needs importance weights or a density ratio")]
    MissingWeights(Method),

    #[error("csPCR-pe needs the target mean of the control variate (exact value or target pool)")]
    MissingTargetMean,

    #[error("a target pool estimate needs the control variate as a function, not precomputed values")]
    PoolNeedsFunction,

    #[error("expected {expected} values, found {found}")]
    LengthMismatch { expected: usize, found: usize },

    #[error("row {row}: weight {value} is negative or non-finite")]
    InvalidWeight { row: usize, value: f64 },

    #[error("row {0}: control variate is non-finite")]
    NonFiniteControl(usize),

    #[error("all importance weights are zero")]
    AllWeightsZero,

    #[error("label {label} out of range 1..={l}")]
    LabelOutOfRange { label: usize, l: usize },
}

impl From<GchisqError> for TestError {
    fn from(e: GchisqError) -> Self {
        match e {
            GchisqError::AllZeroWeights => TestError::DegenerateNull,
            other => TestError::Gchisq(other),
        }
    }
}

/// Source of the importance weights.
#[derive(Clone, Copy)]
pub enum WeightInput<'a> {
    Ratio(&'a dyn DensityRatio),
    /// Precomputed `e_j`, one per row.
    Fixed(&'a [f64]),
}

/// Source of the control-variate values `a_j`.
#[derive(Clone, Copy)]
pub enum ControlInput<'a> {
    Function(&'a dyn ControlVariate),
    Values(&'a [f64]),
}

/// Source of `E_T[a(X, Z, V)]`.
#[derive(Clone, Copy)]
pub enum TargetMean<'a> {
    Exact(f64),
    Pool(&'a UnlabeledPool),
}

/// Everything a test run consumes besides its configuration.
#[derive(Clone, Copy)]
pub struct TestInputs<'a> {
    pub dataset: &'a SourceDataset,
    pub sampler: &'a dyn ConditionalSampler,
    pub statistic: &'a dyn Statistic,
    pub weights: Option<WeightInput<'a>>,
    /// Defaults to the first surrogate coordinate.
    pub control: Option<ControlInput<'a>>,
    pub target_mean: Option<TargetMean<'a>>,
}

impl<'a> TestInputs<'a> {
    pub fn new(dataset: &'a SourceDataset, sampler: &'a dyn ConditionalSampler, statistic: &'a dyn Statistic) -> Self {
        TestInputs { dataset, sampler, statistic, weights: None, control: None, target_mean: None }
    }

    pub fn with_ratio(mut self, ratio: &'a dyn DensityRatio) -> Self {
        self.weights = Some(WeightInput::Ratio(ratio));
        self
    }

    pub fn with_weights(mut self, weights: &'a [f64]) -> Self {
        self.weights = Some(WeightInput::Fixed(weights));
        self
    }

    pub fn with_control(mut self, control: ControlInput<'a>) -> Self {
        self.control = Some(control);
        self
    }

    pub fn with_target_mean(mut self, target_mean: TargetMean<'a>) -> Self {
        self.target_mean = Some(target_mean);
        self
    }
}

/// Per-label sums of one run.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelSummary {
    /// Labels in `1..=L`, one per row.
    pub labels: Vec<usize>,
    /// Weights `w_j` as they entered the sums.
    pub weights: Vec<f64>,
    pub w: Vec<f64>,
    pub d: Vec<f64>,
    pub w_tilde: Option<Vec<f64>>,
    pub gamma_hat: Option<Vec<f64>>,
    /// `L × n`, row `ℓ` holding each sample's contribution to `W̃_ℓ`.
    pub contribution_matrix: Option<DMatrix<f64>>,
    pub a_target_mean: Option<f64>,
}

/// `W_ℓ = Σ w_j 1{ℓ_j = ℓ}` and `D_ℓ = Σ w_j² 1{ℓ_j = ℓ}`.
pub fn weighted_label_sums(labels: &[usize], weights: &[f64], l: usize) -> Result<(Vec<f64>, Vec<f64>), TestError> {
    if labels.len() != weights.len() {
        return Err(TestError::LengthMismatch { expected: labels.len(), found: weights.len() });
    }
    let mut w = vec![0.0; l];
    let mut d = vec![0.0; l];
    for (&label, &wj) in labels.iter().zip(weights) {
        if label == 0 || label > l {
            return Err(TestError::LabelOutOfRange { label, l });
        }
        w[label - 1] += wj;
        d[label - 1] += wj * wj;
    }
    Ok((w, d))
}

/// `(L/n)·diag(D) − (1/L)·J`.
pub fn omega_hat(d: &[f64], n: usize) -> CovMatrix {
    let l = d.len();
    let scale = l as f64 / n as f64;
    let m = DMatrix::from_fn(l, l, |i, j| if i == j { scale * d[i] } else { 0.0 } - 1.0 / l as f64);
    CovMatrix::new(m).expect("finite label sums")
}

/// `(L/n)·Σ (W_ℓ − n/L)²`.
pub fn u_statistic(w: &[f64], n: usize) -> f64 {
    let l = w.len() as f64;
    let center = n as f64 / l;
    l / n as f64 * w.iter().map(|v| (v - center).powi(2)).sum::<f64>()
}

fn indicator(labels: &[usize], label: usize) -> impl Iterator<Item = f64> + '_ {
    labels.iter().map(move |&x| if x == label { 1.0 } else { 0.0 })
}

/// Covariance of `w·1{ℓ_j = ℓ}` with `w·a` over the variance of `w·a`;
/// `0` when that variance is below `1e-12`.
pub fn fit_gamma(labels: &[usize], weights: &[f64], a: &[f64], label: usize) -> f64 {
    let n = labels.len() as f64;
    let wa: Vec<f64> = weights.iter().zip(a).map(|(w, a)| w * a).collect();
    let wi: Vec<f64> = indicator(labels, label).zip(weights).map(|(i, w)| i * w).collect();
    let mean_wa = wa.iter().sum::<f64>() / n;
    let mean_wi = wi.iter().sum::<f64>() / n;
    let var: f64 = wa.iter().map(|v| (v - mean_wa).powi(2)).sum::<f64>() / (n - 1.0);
    if var < 1e-12 {
        return 0.0;
    }
    let cov: f64 = wa.iter().zip(&wi).map(|(x, y)| (x - mean_wa) * (y - mean_wi)).sum::<f64>() / (n - 1.0);
    cov / var
}

/// Slope of the `w`-weighted least-squares regression of `1{ℓ_j = ℓ}` on
/// `a_j` with an intercept; `0` when the weighted variance of `a` is below `1e-12`.
pub fn fit_gamma_regression(labels: &[usize], weights: &[f64], a: &[f64], label: usize) -> f64 {
    let total: f64 = weights.iter().sum();
    if total <= 0.0 {
        return 0.0;
    }
    let mean_a = weights.iter().zip(a).map(|(w, a)| w * a).sum::<f64>() / total;
    let mean_i = indicator(labels, label).zip(weights).map(|(i, w)| w * i).sum::<f64>() / total;
    let mut sxx = 0.0;
    let mut sxy = 0.0;
    for ((&w, &aj), ij) in weights.iter().zip(a).zip(indicator(labels, label)) {
        sxx += w * (aj - mean_a).powi(2);
        sxy += w * (aj - mean_a) * (ij - mean_i);
    }
    if sxx / total < 1e-12 {
        return 0.0;
    }
    sxy / sxx
}

/// Augmented sums `W̃_ℓ` and the `L × n` contribution matrix.
pub fn enhanced_sums(
    labels: &[usize],
    weights: &[f64],
    a: &[f64],
    gamma: &[f64],
    a_target_mean: f64,
) -> (Vec<f64>, DMatrix<f64>) {
    let n = labels.len();
    let l = gamma.len();
    let contributions = DMatrix::from_fn(l, n, |row, j| {
        let ind = if labels[j] == row + 1 { 1.0 } else { 0.0 };
        weights[j] * (ind - gamma[row] * a[j]) + gamma[row] * a_target_mean
    });
    let w_tilde = (0..l).map(|row| contributions.row(row).sum()).collect();
    (w_tilde, contributions)
}

/// `(L/n)·(C − 1/L)(C − 1/L)ᵀ` for the contribution matrix `C`.
pub fn omega_tilde(contributions: &DMatrix<f64>) -> CovMatrix {
    let (l, n) = contributions.shape();
    let centered = contributions.map(|c| c - 1.0 / l as f64);
    let m = (&centered * centered.transpose()) * (l as f64 / n as f64);
    CovMatrix::new(m).expect("finite contributions")
}

/// Sample mean of `a` over a target-population pool.
pub fn estimate_target_mean_a(pool: &UnlabeledPool, a: &dyn ControlVariate) -> Result<f64, TestError> {
    if pool.population() != Population::Target {
        return Err(DataError::WrongPopulation { expected: Population::Target, found: pool.population() }.into());
    }
    let sum: f64 = pool.rows().iter().map(|r| a.value(r.x, &r.z, &r.v)).sum();
    Ok(sum / pool.len() as f64)
}

/// Raw ratio values per row plus the number of clamped evaluations.
fn raw_weights(inputs: &TestInputs<'_>, method: Method) -> Result<(Vec<f64>, u64), TestError> {
    let rows = inputs.dataset.samples();
    let (values, clamps) = match inputs.weights.ok_or(TestError::MissingWeights(method))? {
        WeightInput::Ratio(ratio) => {
            let mut clamps = 0;
            let values = rows
                .iter()
                .map(|s| {
                    let r = ratio.evaluate(s.x, &s.z, &s.v);
                    clamps += u64::from(r.clamped);
                    r.value
                })
                .collect();
            (values, clamps)
        }
        WeightInput::Fixed(w) => {
            if w.len() != rows.len() {
                return Err(TestError::LengthMismatch { expected: rows.len(), found: w.len() });
            }
            (w.to_vec(), 0)
        }
    };
    if let Some((row, &value)) = values.iter().enumerate().find(|(_, v)| !(v.is_finite() && **v >= 0.0)) {
        return Err(TestError::InvalidWeight { row, value });
    }
    if values.iter().all(|&v| v == 0.0) {
        return Err(TestError::AllWeightsZero);
    }
    Ok((values, clamps))
}

fn scale_weights(raw: &[f64], scaling: WeightScaling) -> Vec<f64> {
    match scaling {
        WeightScaling::Raw => raw.to_vec(),
        WeightScaling::MeanOne => {
            let mean = raw.iter().sum::<f64>() / raw.len() as f64;
            raw.iter().map(|w| w / mean).collect()
        }
    }
}

struct Decision {
    spectral: SpectralWeights,
    threshold: f64,
    p_value: f64,
    reject: bool,
}

fn decide(omega: &CovMatrix, statistic: f64, alpha: f64) -> Result<Decision, TestError> {
    let spectral = spectral_weights(omega)?;
    let threshold = rejection_threshold(&spectral, alpha)?;
    let p_value = gchisq_sf(&spectral, statistic)?.clamp(0.0, 1.0);
    Ok(Decision { spectral, threshold, p_value, reject: p_value <= alpha })
}

fn report(config: &TestConfig, n: usize, statistic: f64, decision: Decision, per_label: LabelSummary, diagnostics: Diagnostics) -> TestReport {
    TestReport {
        method: config.method,
        n,
        k: config.k,
        l: config.l,
        alpha: config.alpha,
        seed: config.seed,
        statistic,
        threshold: decision.threshold,
        p_value: decision.p_value,
        reject: decision.reject,
        per_label,
        spectral: decision.spectral,
        diagnostics,
    }
}

fn with_method(config: &TestConfig, method: Method) -> TestConfig {
    TestConfig { method, ..config.clone() }
}

/// Covariate-shift corrected PCR test.
pub fn run_cspcr(inputs: &TestInputs<'_>, config: &TestConfig) -> Result<TestReport, TestError> {
    let config = with_method(config, Method::Cspcr);
    let n = inputs.dataset.len();
    config.validate(n)?;
    let (raw, clamps) = raw_weights(inputs, Method::Cspcr)?;
    let weights = scale_weights(&raw, config.weight_scaling);
    let assignment = assign_labels(inputs.dataset, inputs.sampler, inputs.statistic, config.k, config.l, config.seed)?;
    let (w, d) = weighted_label_sums(&assignment.labels, &weights, config.l)?;
    let u = u_statistic(&w, n);
    let decision = decide(&omega_hat(&d, n), u, config.alpha)?;
    let summary = LabelSummary {
        labels: assignment.labels,
        weights,
        w,
        d,
        w_tilde: None,
        gamma_hat: None,
        contribution_matrix: None,
        a_target_mean: None,
    };
    Ok(report(&config, n, u, decision, summary, Diagnostics::from_weights(&raw, clamps)))
}

/// csPCR with control-variate power enhancement.
pub fn run_cspcr_pe(inputs: &TestInputs<'_>, config: &TestConfig) -> Result<TestReport, TestError> {
    let config = with_method(config, Method::CspcrPe);
    let n = inputs.dataset.len();
    config.validate(n)?;
    let rows = inputs.dataset.samples();
    let control = inputs.control.unwrap_or(ControlInput::Function(&FirstSurrogate));

    let a: Vec<f64> = match control {
        ControlInput::Function(f) => rows.iter().map(|s| f.value(s.x, &s.z, &s.v)).collect(),
        ControlInput::Values(values) => {
            if values.len() != n {
                return Err(TestError::LengthMismatch { expected: n, found: values.len() });
            }
            values.to_vec()
        }
    };
    if let Some(row) = a.iter().position(|v| !v.is_finite()) {
        return Err(TestError::NonFiniteControl(row));
    }
    let a_target_mean = match inputs.target_mean.ok_or(TestError::MissingTargetMean)? {
        TargetMean::Exact(value) => value,
        TargetMean::Pool(pool) => match control {
            ControlInput::Function(f) => estimate_target_mean_a(pool, f)?,
            ControlInput::Values(_) => return Err(TestError::PoolNeedsFunction),
        },
    };

    let (raw, clamps) = raw_weights(inputs, Method::CspcrPe)?;
    let weights = scale_weights(&raw, config.weight_scaling);
    let assignment = assign_labels(inputs.dataset, inputs.sampler, inputs.statistic, config.k, config.l, config.seed)?;
    let labels = assignment.labels;
    let (w, d) = weighted_label_sums(&labels, &weights, config.l)?;

    let gamma: Vec<f64> = (1..=config.l)
        .map(|label| match config.gamma_estimator {
            GammaEstimator::CovarianceRatio => fit_gamma(&labels, &weights, &a, label),
            GammaEstimator::WeightedRegression => fit_gamma_regression(&labels, &weights, &a, label),
        })
        .collect();
    let (w_tilde, contributions) = enhanced_sums(&labels, &weights, &a, &gamma, a_target_mean);
    let u = u_statistic(&w_tilde, n);
    let decision = decide(&omega_tilde(&contributions), u, config.alpha)?;
    let summary = LabelSummary {
        labels,
        weights,
        w,
        d,
        w_tilde: Some(w_tilde),
        gamma_hat: Some(gamma),
        contribution_matrix: Some(contributions),
        a_target_mean: Some(a_target_mean),
    };
    Ok(report(&config, n, u, decision, summary, Diagnostics::from_weights(&raw, clamps)))
}

/// PCR over the given rows, each labeled with the streams of its original index.
fn pcr_on_rows(inputs: &TestInputs<'_>, config: &TestConfig, rows: &[usize]) -> Result<TestReport, TestError> {
    let samples = inputs.dataset.samples();
    let assignment = assign_labels_indexed(
        rows.iter().map(|&i| (i, &samples[i])),
        inputs.sampler,
        inputs.statistic,
        config.k,
        config.l,
        config.seed,
    )?;
    let n = rows.len();
    let weights = vec![1.0; n];
    let (w, d) = weighted_label_sums(&assignment.labels, &weights, config.l)?;
    let u = u_statistic(&w, n);
    let l = config.l;
    let null = DMatrix::from_fn(l, l, |i, j| f64::from(u8::from(i == j)) - 1.0 / l as f64);
    let decision = decide(&CovMatrix::new(null)?, u, config.alpha)?;
    let summary = LabelSummary {
        labels: assignment.labels,
        weights: weights.clone(),
        w,
        d,
        w_tilde: None,
        gamma_hat: None,
        contribution_matrix: None,
        a_target_mean: None,
    };
    Ok(report(config, n, u, decision, summary, Diagnostics::from_weights(&weights, 0)))
}

/// Unweighted PCR test against `χ²_{L−1}`.
pub fn run_pcr(inputs: &TestInputs<'_>, config: &TestConfig) -> Result<TestReport, TestError> {
    let config = with_method(config, Method::Pcr);
    let n = inputs.dataset.len();
    config.validate(n)?;
    let rows: Vec<usize> = (0..n).collect();
    pcr_on_rows(inputs, &config, &rows)
}

/// Indices of `m` rows drawn without replacement with probability
/// proportional to `weights`, in ascending order.
pub fn weighted_sample_without_replacement(weights: &[f64], m: usize, seed: u64) -> Vec<usize> {
    let mut rng = SeedTree::new(seed).child(streams::RESAMPLE).rng();
    // Efraimidis–Spirakis: the m largest keys u^(1/w) form a sequential weighted draw.
    let mut keyed: Vec<(f64, usize)> = weights
        .iter()
        .enumerate()
        .map(|(i, &w)| {
            let u: f64 = rng.random::<f64>().max(f64::MIN_POSITIVE);
            let key = if w > 0.0 { u.ln() / w } else { f64::NEG_INFINITY };
            (key, i)
        })
        .collect();
    keyed.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    let mut chosen: Vec<usize> = keyed.into_iter().take(m).map(|(_, i)| i).collect();
    chosen.sort_unstable();
    chosen
}

/// Importance-resampling comparator: PCR on `m_resample` weighted draws.
pub fn run_is(inputs: &TestInputs<'_>, config: &TestConfig) -> Result<TestReport, TestError> {
    let config = with_method(config, Method::Is);
    let n = inputs.dataset.len();
    config.validate(n)?;
    let (raw, clamps) = raw_weights(inputs, Method::Is)?;
    let rows = weighted_sample_without_replacement(&raw, config.resample_size(n), config.seed);
    let mut out = pcr_on_rows(inputs, &config, &rows)?;
    out.diagnostics = Diagnostics::from_weights(&raw, clamps);
    Ok(out)
}

pub fn run_test(inputs: &TestInputs<'_>, config: &TestConfig) -> Result<TestReport, TestError> {
    match config.method {
        Method::Cspcr => run_cspcr(inputs, config),
        Method::CspcrPe => run_cspcr_pe(inputs, config),
        Method::Pcr => run_pcr(inputs, config),
        Method::Is => run_is(inputs, config),
    }
}
