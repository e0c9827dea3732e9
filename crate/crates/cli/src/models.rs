//! Versioned JSON files for fitted ratio models and treatment samplers.

use std::path::Path;

use cspcr::ratio::{GaussianLinearModel, RatioModel, XzFactor};
use cspcr::ConditionalSampler;
use rand::{Rng, RngCore};
use rand_distr::StandardNormal;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::CliError;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatioFile {
    pub schema_version: u32,
    pub ratio: RatioModel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplerFile {
    pub schema_version: u32,
    pub sampler: SamplerModel,
}

/// Law of `X | Z` used to draw counterfeit treatments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SamplerModel {
    /// `X ~ N(intercept + coefficients·z, noise_variance)`.
    GaussianLinear(GaussianLinearModel),
    /// `X ~ Bernoulli(sigmoid(intercept + coefficients·z))`, coded `0.0` / `1.0`.
    BernoulliLogistic { coefficients: Vec<f64>, intercept: f64 },
}

impl SamplerModel {
    pub fn z_dim(&self) -> usize {
        match self {
            SamplerModel::GaussianLinear(m) => m.coefficients.len(),
            SamplerModel::BernoulliLogistic { coefficients, .. } => coefficients.len(),
        }
    }
}

impl ConditionalSampler for SamplerModel {
    fn sample(&self, z: &[f64], rng: &mut dyn RngCore) -> f64 {
        match self {
            SamplerModel::GaussianLinear(m) => {
                m.predict(z).unwrap_or(f64::NAN) + m.noise_variance.sqrt() * rng.sample::<f64, _>(StandardNormal)
            }
            SamplerModel::BernoulliLogistic { coefficients, intercept } => {
                let eta = intercept + coefficients.iter().zip(z).map(|(b, zi)| b * zi).sum::<f64>();
                let p = 1.0 / (1.0 + (-eta).exp());
                f64::from(u8::from(rng.random::<f64>() < p))
            }
        }
    }
}

fn read<T: DeserializeOwned>(path: &Path, version: impl Fn(&T) -> u32) -> Result<T, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
    let value: T = serde_json::from_str(&text).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
    match version(&value) {
        SCHEMA_VERSION => Ok(value),
        other => Err(CliError::Input(format!(
            "{}: unsupported schema_version {other} (this build reads {SCHEMA_VERSION})",
            path.display()
        ))),
    }
}

pub fn read_ratio(path: &Path) -> Result<RatioModel, CliError> {
    read::<RatioFile>(path, |f| f.schema_version).map(|f| f.ratio)
}

pub fn read_sampler(path: &Path) -> Result<SamplerModel, CliError> {
    read::<SamplerFile>(path, |f| f.schema_version).map(|f| f.sampler)
}

pub fn ratio_json(ratio: RatioModel) -> String {
    let mut text = serde_json::to_string_pretty(&RatioFile { schema_version: SCHEMA_VERSION, ratio }).expect("model serializes");
    text.push('\n');
    text
}

/// Checks that a ratio model expects `z_dim` confounders and `v_dim` surrogates.
pub fn check_ratio_dims(ratio: &RatioModel, z_dim: usize, v_dim: usize) -> Result<(), CliError> {
    let mismatch = |what: &str, expected: usize, found: usize| {
        Err(CliError::Input(format!("ratio model expects {expected} {what}, data has {found}")))
    };
    let xz_len = match ratio {
        RatioModel::Classifier(c) => Some(c.coefficients.len()),
        RatioModel::Factorized(f) => {
            if f.v_source.len() != v_dim || f.v_target.len() != v_dim {
                return mismatch("surrogate columns", f.v_source.len(), v_dim);
            }
            if let Some(m) = f.v_source.iter().chain(&f.v_target).find(|m| m.coefficients.len() != z_dim + 1) {
                return mismatch("confounder columns", m.coefficients.len().saturating_sub(1), z_dim);
            }
            match &f.xz_factor {
                XzFactor::Unit => None,
                XzFactor::MeanShift(m) if m.source_mean.len() > z_dim || m.target_mean.len() != m.source_mean.len() => {
                    return mismatch("confounder columns", m.source_mean.len(), z_dim);
                }
                XzFactor::MeanShift(_) => None,
                XzFactor::Classifier(c) => Some(c.coefficients.len()),
            }
        }
    };
    match xz_len {
        Some(len) if len != z_dim + 1 => mismatch("confounder columns", len.saturating_sub(1), z_dim),
        _ => Ok(()),
    }
}
