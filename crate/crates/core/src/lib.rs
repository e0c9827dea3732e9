//! Conditional independence testing under covariate shift.
//!
//! The crate implements the covariate-shift corrected Pearson chi-squared
//! conditional randomization test (csPCR), its control-variate power-enhanced
//! variant, the unweighted PCR baseline, and an importance-resampling
//! comparator. Supporting modules provide density-ratio estimation, the
//! generalized chi-squared null law, and a Monte Carlo simulation lab.
//!
//! Module map:
//!
//! - [`model`]: shared domain types, validation, and pluggable function contracts
//! - [`gchisq`]: spectral weights, CDF and quantiles of `xᵀx` for `x ~ N(0, Ω)`
//! - [`ratio`]: analytic, classifier, and factorized density-ratio models
//! - [`randomize`]: counterfeit draws, ranking, and label assignment
//! - [`engine`]: the four test procedures and their building blocks
//! - [`simlab`]: data-generating process and experiment driver
//! - [`rng`]: named, schedule-independent random streams

pub mod engine;
pub mod gchisq;
pub mod model;
pub mod randomize;
pub mod ratio;
pub mod rng;
pub mod simlab;

pub use engine::{
    run_cspcr, run_cspcr_pe, run_is, run_pcr, run_test, ControlInput, LabelSummary, TargetMean,
    TestError, TestInputs, WeightInput,
};
pub use gchisq::{CovMatrix, GchisqError, SpectralWeights};
pub use model::{
    ConditionalSampler, ControlVariate, DensityRatio, FirstSurrogate, GammaEstimator,
    LabeledSample, Method, ProductStatistic, Provenance, RatioValue, SourceDataset, Statistic,
    TestConfig, TestReport, UnlabeledPool, WeightScaling,
};
