//! The law of `A = xᵀx` for `x ~ N(0, Ω)`.
//!
//! By spectral decomposition `A` is distributed as `Σ λᵢ gᵢ²` with `λ` the
//! eigenvalues of `Ω` and `gᵢ` independent standard normals. The CDF is
//! approximated by a mixture of up to four gammas matching the first eight
//! moments, falling back to a three-cumulant shifted gamma when the weights
//! are equal or the moment system is degenerate. [`mc_quantile`] provides a
//! brute-force cross-check.

use nalgebra::{DMatrix, DVector, Schur, SymmetricEigen};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::gamma_lr;
use thiserror::Error;

use crate::rng::{streams, SeedTree};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GchisqError {
    #[error("all spectral weights are zero: the null law is degenerate")]
    AllZeroWeights,

    #[error("covariance matrix contains non-finite entries")]
    NonFinite,

    #[error("covariance matrix must be square, got {rows}x{cols}")]
    NotSquare { rows: usize, cols: usize },

    #[error("probability must lie in (0, 1), got {0}")]
    InvalidProbability(f64),

    #[error("Monte Carlo quantile needs at least 10000 draws, got {0}")]
    TooFewDraws(usize),
}

/// Symmetric covariance matrix. The input is symmetrized as `(M + Mᵀ)/2`.
#[derive(Debug, Clone, PartialEq)]
pub struct CovMatrix {
    inner: DMatrix<f64>,
}

impl CovMatrix {
    pub fn new(matrix: DMatrix<f64>) -> Result<Self, GchisqError> {
        if !matrix.is_square() {
            return Err(GchisqError::NotSquare { rows: matrix.nrows(), cols: matrix.ncols() });
        }
        if matrix.iter().any(|v| !v.is_finite()) {
            return Err(GchisqError::NonFinite);
        }
        let inner = (&matrix + matrix.transpose()) * 0.5;
        Ok(CovMatrix { inner })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, GchisqError> {
        let n = rows.len();
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(GchisqError::NotSquare { rows: n, cols });
        }
        Self::new(DMatrix::from_fn(n, cols, |i, j| rows[i][j]))
    }

    pub fn dim(&self) -> usize {
        self.inner.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.inner
    }
}

/// Eigenvalues of a covariance matrix, sorted nonincreasing, negatives clipped.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectralWeights {
    pub lambdas: Vec<f64>,
    /// Total magnitude of negative eigenvalues that were clipped to zero.
    pub clipped_mass: f64,
}

impl SpectralWeights {
    /// Weights supplied directly, e.g. in tests. Values must be finite and nonnegative.
    pub fn from_lambdas(mut lambdas: Vec<f64>) -> Self {
        debug_assert!(lambdas.iter().all(|l| l.is_finite() && *l >= 0.0));
        lambdas.sort_by(|a, b| b.total_cmp(a));
        SpectralWeights { lambdas, clipped_mass: 0.0 }
    }

    pub fn is_degenerate(&self) -> bool {
        self.lambdas.iter().all(|&l| l <= 0.0)
    }

    /// First three cumulants of the weighted chi-squared sum.
    fn cumulants(&self) -> (f64, f64, f64) {
        let s1: f64 = self.lambdas.iter().sum();
        let s2: f64 = self.lambdas.iter().map(|l| l * l).sum();
        let s3: f64 = self.lambdas.iter().map(|l| l * l * l).sum();
        (s1, 2.0 * s2, 8.0 * s3)
    }
}

pub fn spectral_weights(omega: &CovMatrix) -> Result<SpectralWeights, GchisqError> {
    let eigen = SymmetricEigen::try_new(omega.inner.clone(), f64::EPSILON, 0)
        .ok_or(GchisqError::NonFinite)?;
    let raw: Vec<f64> = eigen.eigenvalues.iter().copied().collect();
    if raw.iter().any(|v| !v.is_finite()) {
        return Err(GchisqError::NonFinite);
    }
    let largest = raw.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let eps = 1e-10 * largest.max(1.0);
    let mut clipped_mass = 0.0;
    let mut lambdas: Vec<f64> = raw
        .into_iter()
        .map(|v| {
            if v <= -eps {
                clipped_mass += -v;
                0.0
            } else if v < eps {
                0.0
            } else {
                v
            }
        })
        .collect();
    lambdas.sort_by(|a, b| b.total_cmp(a));
    Ok(SpectralWeights { lambdas, clipped_mass })
}

/// Moment-matched gamma law: `A ≈ (G − ν)·sqrt(c₂/(2ν)) + c₁` with `G ~ χ²_ν`.
struct GammaMatch {
    c1: f64,
    c2: f64,
    nu: f64,
}

impl GammaMatch {
    fn new(weights: &SpectralWeights) -> Self {
        let (c1, c2, c3) = weights.cumulants();
        GammaMatch { c1, c2, nu: 8.0 * c2.powi(3) / (c3 * c3) }
    }

    fn cdf(&self, x: f64) -> f64 {
        let shifted = (2.0 * self.nu / self.c2).sqrt() * (x - self.c1) + self.nu;
        if shifted <= 0.0 {
            0.0
        } else {
            gamma_lr(self.nu / 2.0, shifted / 2.0)
        }
    }
}

/// Number of gamma components matched by [`GammaMixture`].
const MIXTURE_ORDER: usize = 4;

/// Mixture of `p` gammas with a common shape matching the first `2p` moments
/// (Lindsay, Pilla and Basak, 2000).
#[derive(Debug)]
struct GammaMixture {
    shape: f64,
    scales: Vec<f64>,
    probs: Vec<f64>,
}

impl GammaMixture {
    /// `None` when the moment system is degenerate, e.g. for equal weights,
    /// where the gamma match is already exact.
    fn fit(weights: &SpectralWeights) -> Option<Self> {
        let positive: Vec<f64> = weights.lambdas.iter().copied().filter(|&l| l > 0.0).collect();
        let top = *positive.first()?;
        let order = positive.len().min(MIXTURE_ORDER);
        if order < 2 || positive.iter().all(|&l| top - l <= 1e-12 * top) {
            return None;
        }
        let scaled: Vec<f64> = positive.iter().map(|l| l / top).collect();
        let mu = raw_moments(&scaled, 2 * order);

        let mut rate = mu[2] / (mu[1] * mu[1]) - 1.0;
        for n in 2..=order {
            rate = hankel_root(&mu, n, rate)?;
        }
        let hankel = moment_hankel(&mu, order, rate);

        // Coefficients of the polynomial whose roots are the component means.
        let coeffs: Vec<f64> = (0..=order)
            .map(|i| {
                let minor = hankel.clone().remove_row(order).remove_column(i);
                let sign = if (order + i).is_multiple_of(2) { 1.0 } else { -1.0 };
                sign * minor.determinant()
            })
            .collect();
        let lead = coeffs[order];
        if lead == 0.0 || !lead.is_finite() {
            return None;
        }
        let companion = DMatrix::from_fn(order, order, |i, j| {
            if j == order - 1 {
                -coeffs[i] / lead
            } else if i == j + 1 {
                1.0
            } else {
                0.0
            }
        });
        let roots: Vec<f64> = Schur::try_new(companion, f64::EPSILON, 0)?
            .complex_eigenvalues()
            .iter()
            .map(|c| (c.re > 0.0 && c.im.abs() <= 1e-6 * c.re).then_some(c.re))
            .collect::<Option<_>>()?;

        let vandermonde = DMatrix::from_fn(order, order, |i, j| roots[j].powi(i as i32));
        let rhs = DVector::from_fn(order, |i, _| hankel[(i, 0)]);
        let probs = vandermonde.lu().solve(&rhs)?;
        if probs.iter().any(|p| !p.is_finite() || *p < -1e-10) || (probs.sum() - 1.0).abs() > 1e-6 {
            return None;
        }

        let mixture = GammaMixture {
            shape: 1.0 / rate,
            scales: roots.iter().map(|r| r * rate * top).collect(),
            probs: probs.iter().map(|p| p.max(0.0)).collect(),
        };
        (mixture.shape.is_finite() && mixture.scales.iter().all(|s| s.is_finite())).then_some(mixture)
    }

    fn cdf(&self, x: f64) -> f64 {
        if x <= 0.0 {
            return 0.0;
        }
        let total: f64 = self.scales.iter().zip(&self.probs).map(|(s, p)| p * gamma_lr(self.shape, x / s)).sum();
        total.min(1.0)
    }
}

/// Raw moments `μ₀..μₘ` of `Σ λᵢ gᵢ²` from its cumulants `2^{r−1}(r−1)! Σ λᵢʳ`.
fn raw_moments(lambdas: &[f64], max: usize) -> Vec<f64> {
    let mut kappa = vec![0.0; max + 1];
    let mut factor = 1.0;
    for (r, k) in kappa.iter_mut().enumerate().skip(1) {
        if r > 1 {
            factor *= 2.0 * (r - 1) as f64;
        }
        *k = factor * lambdas.iter().map(|l| l.powi(r as i32)).sum::<f64>();
    }
    let mut mu = vec![1.0; max + 1];
    for m in 1..=max {
        let mut binom = 1.0;
        let mut total = 0.0;
        for j in 1..=m {
            total += binom * kappa[j] * mu[m - j];
            binom *= (m - j) as f64 / j as f64;
        }
        mu[m] = total;
    }
    mu
}

/// `(n+1)×(n+1)` Hankel matrix of moments deflated by `Π (1 + k·d)`.
fn moment_hankel(mu: &[f64], n: usize, d: f64) -> DMatrix<f64> {
    let mut deflated = Vec::with_capacity(2 * n + 1);
    let mut divisor = 1.0;
    for (k, m) in mu.iter().take(2 * n + 1).enumerate() {
        if k >= 2 {
            divisor *= 1.0 + (k - 1) as f64 * d;
        }
        deflated.push(m / divisor);
    }
    DMatrix::from_fn(n + 1, n + 1, |i, j| deflated[i + j])
}

/// Root of `det(moment_hankel(d))` on `(0, upper)`, by bisection.
fn hankel_root(mu: &[f64], n: usize, upper: f64) -> Option<f64> {
    let f = |d: f64| moment_hankel(mu, n, d).determinant();
    let (mut lo, mut hi) = (0.0, upper);
    let (f_lo, f_hi) = (f(lo), f(hi));
    if !(f_lo.is_finite() && f_hi.is_finite()) || f_lo.signum() == f_hi.signum() {
        return None;
    }
    while hi - lo > 1e-14 * upper {
        let mid = lo + (hi - lo) / 2.0;
        if f(mid).signum() == f_lo.signum() {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let root = lo + (hi - lo) / 2.0;
    (root > 0.0).then_some(root)
}

/// Approximate law of `Σ λᵢ gᵢ²`: the gamma mixture when it can be fitted,
/// the three-cumulant gamma match otherwise.
struct NullLaw {
    gamma: GammaMatch,
    mixture: Option<GammaMixture>,
}

impl NullLaw {
    fn new(weights: &SpectralWeights) -> Result<Self, GchisqError> {
        if weights.is_degenerate() {
            return Err(GchisqError::AllZeroWeights);
        }
        Ok(NullLaw { gamma: GammaMatch::new(weights), mixture: GammaMixture::fit(weights) })
    }

    fn cdf(&self, x: f64) -> f64 {
        match &self.mixture {
            Some(m) => m.cdf(x),
            None => self.gamma.cdf(x),
        }
    }

    /// Bisects to float adjacency, keeping `pred(lo) == false`, `pred(hi) == true`.
    fn bisect(&self, pred: impl Fn(f64) -> bool) -> f64 {
        let mut lo = 0.0f64;
        if pred(lo) {
            return lo;
        }
        let mut hi = self.gamma.c1 + 20.0 * self.gamma.c2.sqrt();
        while !pred(hi) {
            lo = hi;
            hi *= 2.0;
        }
        loop {
            let mid = lo + (hi - lo) / 2.0;
            if mid <= lo || mid >= hi {
                return hi;
            }
            if pred(mid) {
                hi = mid;
            } else {
                lo = mid;
            }
        }
    }
}

/// `P(Σ λᵢ χ²₁ ≤ x)` by four-moment gamma-mixture matching.
pub fn gchisq_cdf(weights: &SpectralWeights, x: f64) -> Result<f64, GchisqError> {
    let law = NullLaw::new(weights)?;
    if x.is_nan() {
        return Err(GchisqError::NonFinite);
    }
    Ok(law.cdf(x))
}

/// Upper-tail probability `1 − cdf(x)`.
pub fn gchisq_sf(weights: &SpectralWeights, x: f64) -> Result<f64, GchisqError> {
    gchisq_cdf(weights, x).map(|c| 1.0 - c)
}

pub fn gchisq_quantile(weights: &SpectralWeights, prob: f64) -> Result<f64, GchisqError> {
    if !(prob > 0.0 && prob < 1.0) {
        return Err(GchisqError::InvalidProbability(prob));
    }
    let law = NullLaw::new(weights)?;
    Ok(law.bisect(|x| law.cdf(x) >= prob))
}

/// Smallest `θ` (to float adjacency) with `1 − cdf(θ) ≤ alpha`.
///
/// Using the same tail expression as the p-value keeps `U ≥ θ ⇔ p ≤ α`.
pub fn rejection_threshold(weights: &SpectralWeights, alpha: f64) -> Result<f64, GchisqError> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(GchisqError::InvalidProbability(alpha));
    }
    let law = NullLaw::new(weights)?;
    Ok(law.bisect(|x| 1.0 - law.cdf(x) <= alpha))
}

/// Empirical `prob`-quantile of `Σ λᵢ gᵢ²` over `draws` simulated values.
pub fn mc_quantile(
    weights: &SpectralWeights,
    prob: f64,
    draws: usize,
    seed: u64,
) -> Result<f64, GchisqError> {
    if !(prob > 0.0 && prob < 1.0) {
        return Err(GchisqError::InvalidProbability(prob));
    }
    if draws < 10_000 {
        return Err(GchisqError::TooFewDraws(draws));
    }
    let active: Vec<f64> = weights.lambdas.iter().copied().filter(|&l| l > 0.0).collect();
    if active.is_empty() {
        return Ok(0.0);
    }
    let mut rng = SeedTree::new(seed).child(streams::MONTE_CARLO).rng();
    let mut values: Vec<f64> = (0..draws)
        .map(|_| {
            active
                .iter()
                .map(|l| {
                    let g: f64 = rng.sample(StandardNormal);
                    l * g * g
                })
                .sum()
        })
        .collect();
    let idx = ((prob * draws as f64).ceil() as usize).clamp(1, draws) - 1;
    let (_, value, _) = values.select_nth_unstable_by(idx, f64::total_cmp);
    Ok(*value)
}
