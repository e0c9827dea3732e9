//! Simulation data-generating process and its analytic truths.
//!
//! Each population draws
//!
//! - `Z_r ~ N(μ_pop·1, I_p)` and `Z_null ~ N(0.1·1, I_q)`,
//! - `X ~ N(uᵀZ_r, 1)`,
//! - `V ~ N(v_popᵀZ_r + (1−θ)·a_pop·X + θ·a_pop·sin X, 1)`,
//! - `Y ~ N((v_Sᵀ Z_r)² + β·V + γ·X, 1)`.
//!
//! The outcome law is shared, so the populations differ only in their
//! covariates. Source and target share `X | Z`, so the density ratio is the
//! product of a `Z_r` mean-shift factor and a `V | X, Z` factor.

mod experiment;

pub use experiment::{
    preset, run_experiment, run_trial, write_csv, CellResult, ExperimentGrid, RatioMode, Sweep,
    SweepParam, TargetMeanMode, TrialOutcome, PRESETS,
};

use rand::{Rng, RngCore};
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::model::{
    CovariateRow, DensityRatio, LabeledSample, Population, Provenance, RatioValue, SourceDataset,
    UnlabeledPool,
};
use crate::ratio::{log_gaussian_ratio, GaussianMeanShift};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DgpParams {
    /// Relevant confounders `Z_r`.
    pub p: usize,
    /// Null confounders `Z_null`.
    pub q: usize,
    pub u: Vec<f64>,
    pub v_s: Vec<f64>,
    pub v_t: Vec<f64>,
    pub a_s: f64,
    pub a_t: f64,
    pub theta_nl: f64,
    pub beta_indirect: f64,
    pub gamma_direct: f64,
    pub n_labeled: usize,
    pub n_pool: usize,
    pub z_mean_source: f64,
    pub z_mean_target: f64,
    pub z_null_mean: f64,
}

impl Default for DgpParams {
    fn default() -> Self {
        let p = 5;
        let unit = vec![1.0 / (p as f64).sqrt(); p];
        DgpParams {
            p,
            q: 50,
            u: unit.clone(),
            v_s: unit.clone(),
            v_t: unit,
            a_s: 1.0,
            a_t: 0.0,
            theta_nl: 0.0,
            beta_indirect: 1.0,
            gamma_direct: 0.0,
            n_labeled: 500,
            n_pool: 1000,
            z_mean_source: 0.0,
            z_mean_target: 1.0,
            z_null_mean: 0.1,
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

impl DgpParams {
    /// Setting where `H₀` holds in the target but not in the source.
    pub fn null_shift() -> Self {
        DgpParams::default()
    }

    /// Setting where `H₀` fails in the target through `V`.
    pub fn alternative(beta: f64) -> Self {
        DgpParams { a_s: 0.0, a_t: 2.0, beta_indirect: beta, ..DgpParams::default() }
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.p == 0 {
            return Err("p must be positive".into());
        }
        for (name, v) in [("u", &self.u), ("v_s", &self.v_s), ("v_t", &self.v_t)] {
            if v.len() != self.p {
                return Err(format!("{name} has length {}, expected p = {}", v.len(), self.p));
            }
        }
        if !(0.0..=1.0).contains(&self.theta_nl) {
            return Err(format!("theta_nl must lie in [0, 1], got {}", self.theta_nl));
        }
        if self.n_labeled == 0 || self.n_pool == 0 {
            return Err("sample sizes must be positive".into());
        }
        let scalars = [self.a_s, self.a_t, self.beta_indirect, self.gamma_direct, self.z_mean_source, self.z_mean_target, self.z_null_mean];
        if scalars.iter().chain(&self.u).chain(&self.v_s).chain(&self.v_t).any(|v| !v.is_finite()) {
            return Err("parameters must be finite".into());
        }
        Ok(())
    }

    fn z_mean(&self, population: Population) -> f64 {
        match population {
            Population::Source => self.z_mean_source,
            Population::Target => self.z_mean_target,
        }
    }

    fn v_coef(&self, population: Population) -> (&[f64], f64) {
        match population {
            Population::Source => (&self.v_s, self.a_s),
            Population::Target => (&self.v_t, self.a_t),
        }
    }

    /// `E[V | X = x, Z_r = z_r]` in `population`.
    pub fn v_mean(&self, population: Population, x: f64, z_r: &[f64]) -> f64 {
        let (v, a) = self.v_coef(population);
        dot(v, z_r) + (1.0 - self.theta_nl) * a * x + self.theta_nl * a * x.sin()
    }

    /// `E[Y | X, Z_r, V]`, identical in both populations.
    pub fn y_mean(&self, x: f64, z_r: &[f64], v: f64) -> f64 {
        dot(&self.v_s, z_r).powi(2) + self.beta_indirect * v + self.gamma_direct * x
    }

    fn draw_covariates(&self, population: Population, rng: &mut dyn RngCore) -> (f64, Vec<f64>, f64) {
        let mu = self.z_mean(population);
        let mut z = Vec::with_capacity(self.p + self.q);
        z.extend((0..self.p).map(|_| mu + rng.sample::<f64, _>(StandardNormal)));
        z.extend((0..self.q).map(|_| self.z_null_mean + rng.sample::<f64, _>(StandardNormal)));
        let x = dot(&self.u, &z[..self.p]) + rng.sample::<f64, _>(StandardNormal);
        let v = self.v_mean(population, x, &z[..self.p]) + rng.sample::<f64, _>(StandardNormal);
        (x, z, v)
    }

    pub fn gen_labeled(&self, population: Population, n: usize, rng: &mut dyn RngCore) -> SourceDataset {
        let rows = (0..n)
            .map(|_| {
                let (x, z, v) = self.draw_covariates(population, rng);
                let y = self.y_mean(x, &z[..self.p], v) + rng.sample::<f64, _>(StandardNormal);
                LabeledSample::new(y, x, z, vec![v])
            })
            .collect();
        SourceDataset::new(rows).expect("generated rows are finite and uniform")
    }

    pub fn gen_pool(&self, population: Population, n: usize, rng: &mut dyn RngCore) -> UnlabeledPool {
        let rows = (0..n)
            .map(|_| {
                let (x, z, v) = self.draw_covariates(population, rng);
                CovariateRow { x, z, v: vec![v] }
            })
            .collect();
        UnlabeledPool::new(population, rows).expect("generated rows are finite and uniform")
    }

    /// Exact `E_T[V]`, using `E[sin X] = sin(μ)·exp(−σ²/2)` for `X ~ N(μ, σ²)`.
    pub fn target_mean_v(&self) -> f64 {
        let m = self.z_mean_target;
        let mu = m * self.u.iter().sum::<f64>();
        let var = dot(&self.u, &self.u) + 1.0;
        m * self.v_t.iter().sum::<f64>()
            + (1.0 - self.theta_nl) * self.a_t * mu
            + self.theta_nl * self.a_t * mu.sin() * (-var / 2.0).exp()
    }

    /// The `Z_r` factor of the density ratio.
    pub fn z_shift(&self) -> GaussianMeanShift {
        GaussianMeanShift {
            source_mean: vec![self.z_mean_source; self.p],
            target_mean: vec![self.z_mean_target; self.p],
        }
    }

    pub fn sampler(&self) -> DgpSampler {
        DgpSampler { u: self.u.clone() }
    }
}

/// `X ~ N(uᵀz_r, 1)`, reading `z_r` from the leading coordinates of `z`.
#[derive(Debug, Clone, PartialEq)]
pub struct DgpSampler {
    pub u: Vec<f64>,
}

impl crate::model::ConditionalSampler for DgpSampler {
    fn sample(&self, z: &[f64], rng: &mut dyn RngCore) -> f64 {
        dot(&self.u, z) + rng.sample::<f64, _>(StandardNormal)
    }
}

/// The exact density ratio of the simulation design.
#[derive(Debug, Clone, PartialEq)]
pub struct AnalyticDgpRatio {
    params: DgpParams,
    shift: GaussianMeanShift,
}

impl AnalyticDgpRatio {
    pub fn log_ratio(&self, x: f64, z: &[f64], v: &[f64]) -> f64 {
        let z_r = &z[..self.params.p];
        let m_t = self.params.v_mean(Population::Target, x, z_r);
        let m_s = self.params.v_mean(Population::Source, x, z_r);
        self.shift.log_ratio(z_r) + log_gaussian_ratio(v[0], m_t, 1.0, m_s, 1.0)
    }
}

impl DensityRatio for AnalyticDgpRatio {
    fn evaluate(&self, x: f64, z: &[f64], v: &[f64]) -> RatioValue {
        RatioValue::from_log(self.log_ratio(x, z, v))
    }

    fn provenance(&self) -> Provenance {
        Provenance::Analytic
    }
}

pub fn analytic_dgp_ratio(params: &DgpParams) -> AnalyticDgpRatio {
    AnalyticDgpRatio { params: params.clone(), shift: params.z_shift() }
}
